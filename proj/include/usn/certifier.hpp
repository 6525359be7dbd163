#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "usn/network.hpp"
#include "usn/perturbation.hpp"

namespace usn {

enum class Verdict { Holds, Violated, Unknown };
enum class CertMethod { GridLipschitz, Probabilistic, SamplingFalsify };

const char* to_string(Verdict v);
const char* to_string(CertMethod m);

/// Certification goal: every output coordinate moves by at most `delta` pixels, measured
/// in the q-norm over the whole output (q = 2 or infinity).
struct KeypointCriterion {
    double delta = 1.0;
    double q = std::numeric_limits<double>::infinity();
};

void validate(const KeypointCriterion& c);
double output_deviation(std::span<const double> a, std::span<const double> b, double q);

/// Layer spectral norms and head constant of one network; C_i is derived on demand.
struct LipschitzProfile {
    Vec norms;
    double head = 1.0;
    double seconds = 0.0;

    double constant(std::size_t depth) const;
};

LipschitzProfile lipschitz_profile(const Network& net, const PowerIterationOptions& power = {});

struct CertificateResult {
    Verdict verdict = Verdict::Unknown;
    CertMethod method = CertMethod::GridLipschitz;
    double margin = 0.0;      // slack in the binding inequality; negative when it fails
    double confidence = 1.0;  // 1 - alpha for probabilistic results
    double wall_time = 0.0;   // seconds

    // grid-lipschitz
    double bound = 0.0;  // worst per-cell deviation bound
    std::size_t cells = 0;
    Vec keypoint_bounds;  // worst bound per keypoint (per output entry without a head)

    // probabilistic
    int failing_layer = -1;  // 0-based linear layer index
    long failing_neuron = -1;
    std::string failing_condition;

    // sampling-falsify
    std::optional<double> witness;
    double max_deviation = 0.0;
};

struct GridOptions {
    std::size_t n_cells = 16;
    /// Cells whose bound exceeds delta are bisected until this many cells exist.
    std::size_t max_cells = 16;
    /// Relative inflation of C_0 covering the power-iteration estimate approaching from below.
    double lipschitz_slack = 1e-6;
};

CertificateResult certify_grid(const Network& net, const Image& x0, const PerturbationSpec& spec,
                               const KeypointCriterion& criterion, const GridOptions& options,
                               const LipschitzProfile& profile);
CertificateResult certify_grid(const Network& net, const Image& x0, const PerturbationSpec& spec,
                               const KeypointCriterion& criterion, std::size_t n_cells);

struct ProbabilisticBounds {
    double bias = 0.0;
    double variance = 0.0;
};

/// Per-neuron bias and variance thresholds at depth i (1 <= i <= L-1) of an L-layer net
/// with layer width d and layer-to-output constant c.
ProbabilisticBounds probabilistic_bounds(double c, std::size_t d, std::size_t depth, std::size_t num_layers,
                                         double delta, double alpha);

/// Uses the unbiased 1/(m-1) variance estimate.
CertificateResult certify_probabilistic(const Network& net, const Image& x0, std::span<const Image> samples,
                                        const KeypointCriterion& criterion, double alpha,
                                        const LipschitzProfile& profile);
CertificateResult certify_probabilistic(const Network& net, const Image& x0, const PerturbationSpec& spec,
                                        const KeypointCriterion& criterion, double alpha, std::size_t m,
                                        std::mt19937_64& rng);

struct NecessaryBounds {
    double unbiased = 0.0;
    double smooth = 0.0;
};

/// Upper bounds the layer metrics must satisfy when every neuron passes the probabilistic
/// certificate. `depth` is the 1-based layer i.
NecessaryBounds usn_necessary_bounds(const Network& net, std::size_t depth, const KeypointCriterion& criterion,
                                     double alpha);
NecessaryBounds usn_necessary_bounds(const LipschitzProfile& profile, std::size_t width, std::size_t depth,
                                     const KeypointCriterion& criterion, double alpha);

/// Samples m parameters plus both endpoints and reports Violated with a witness when any
/// of them moves the output by more than delta.
CertificateResult falsify(const Network& net, const Image& x0, const PerturbationSpec& spec,
                          const KeypointCriterion& criterion, std::size_t m, std::mt19937_64& rng);

// Campaign --------------------------------------------------------------------------------

struct LabeledImage {
    std::string id;
    Image image;
    Vec keypoints;  // [x0, y0, x1, y1, ...] in pixels
};

struct CampaignConfig {
    KeypointCriterion criterion;
    GridOptions grid;
    double correct_tolerance = 2.0;  // pixel radius for a correct prediction
    std::size_t falsify_samples = 256;
    bool run_probabilistic = false;
    double alpha = 0.01;
    std::size_t probabilistic_samples = 256;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
};

struct CampaignNet {
    std::string name;
    const Network* net = nullptr;
};

struct VerdictRecord {
    std::string net;
    std::string image_id;
    std::string spec;
    Verdict verdict = Verdict::Unknown;
    CertMethod method = CertMethod::GridLipschitz;
    double margin = 0.0;
    double time = 0.0;
    std::size_t cells = 0;
    std::size_t keypoints_correct = 0;
    std::size_t keypoints_verified = 0;
    std::size_t keypoints_correct_and_verified = 0;
    std::optional<Verdict> probabilistic;
};

struct CampaignSummary {
    std::string net;
    std::string spec;
    std::size_t images = 0;
    std::size_t holds = 0;
    std::size_t violated = 0;
    std::size_t unknown = 0;
    double accuracy = 0.0;
    double mean_time = 0.0;
    double profile_time = 0.0;
    std::size_t keypoints_total = 0;
    std::size_t keypoints_correct = 0;
    std::size_t keypoints_correct_and_verified = 0;
    std::size_t probabilistic_holds = 0;
    std::size_t parameters = 0;
};

struct CampaignReport {
    std::vector<VerdictRecord> records;
    std::vector<CampaignSummary> summaries;
    KeypointCriterion criterion;
    CampaignConfig config;
};

CampaignReport campaign(std::span<const CampaignNet> nets, std::span<const LabeledImage> test_set,
                        std::span<const PerturbationSpec> specs, const CampaignConfig& config);

/// Recomputes a summary's counts from the raw verdict records.
CampaignSummary summarize(std::span<const VerdictRecord> records, const std::string& net, const std::string& spec);

void write_verdicts_csv(std::ostream& out, const CampaignReport& report);
std::string summary_json(const CampaignReport& report);

}  // namespace usn
