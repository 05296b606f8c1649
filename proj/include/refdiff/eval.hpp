#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refdiff/corpus.hpp"
#include "refdiff/store.hpp"

namespace refdiff {

// ---------------------------------------------------------------------------
// Metrics (ground-truth-referenced; synthetic pairs carry the true target)
// ---------------------------------------------------------------------------

// Mean squared pixel error restricted to each parsing region, plus the
// figure-wide value (union of all non-background regions). Empty regions are
// skipped (absent from the map).
std::map<int, double> masked_mse(const Tensor& generated, const Tensor& target, const ImageU8& parsing,
                                 double* figure_wide = nullptr);

// 1 - ||mean RGB of the generated region - mean masked RGB of the reference
// part|| / sqrt(3). Returns nullopt when the region or the mask is empty.
std::optional<double> part_color_fidelity(const Tensor& generated, const ImageU8& target_parsing,
                                          ParsingLabel region, const RefPart& ref);

ParsingLabel parsing_label_for_class(int class_label);  // inverse taxonomy mapping

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct PartScore {
    int label           = -1;
    double mse          = 0;
    double fidelity     = 0;
    bool fidelity_valid = false;
};

struct PairScore {
    std::string pair_id;
    double overall_mse = 0;
    double mean_fidelity = 0;  // over scored parts
    std::vector<PartScore> parts;
};

struct EvalReport {
    std::string variant_tag;
    uint64_t seed    = 0;
    int sample_count = 0;
    std::vector<PairScore> rows;
    double mse_mean = 0, mse_std = 0;
    double fid_mean = 0, fid_std = 0;

    void finalize();  // aggregates from rows
};

void write_report(const std::string& path, const EvalReport& report);

// Generates one image per pair (full condition, no dropout) and scores it
// against the ground-truth target.
EvalReport evaluate_checkpoint(const Params& params, const RunConfig& rc, const std::string& corpus_dir,
                               const std::vector<PairRecord>& pairs, uint64_t seed,
                               const std::string& variant_tag);

// ---------------------------------------------------------------------------
// Ablation harness: evaluates pre-trained {full, no_labels, no_mask}
// checkpoints under identical budgets and emits ordering verdicts.
// ---------------------------------------------------------------------------

struct AblationVerdict {
    std::string metric;   // "part_color_fidelity" or "masked_mse"
    std::string variant;  // the ablated variant compared against full
    uint64_t seed = 0;
    double full_value = 0, variant_value = 0;
    bool full_better_mean = false;  // raw mean ordering (per-seed majority input)
    std::string ci_verdict;         // full_better | variant_better | inconclusive
};

struct AblationResult {
    std::vector<EvalReport> reports;
    std::vector<AblationVerdict> verdicts;
};

// Checkpoints are looked up as <ckpt_dir>/<variant>_seed<seed>.ckpt; a missing
// variant checkpoint is a hard error. Each variant's stored config must differ
// from full's in exactly one line (the ablated component).
AblationResult ablation_run(const std::string& corpus_dir, const std::string& ckpt_dir,
                            const std::vector<uint64_t>& seeds, int budget_pairs);

// ---------------------------------------------------------------------------
// Flexibility: any-quantity part subsets and cross-identity mixes
// ---------------------------------------------------------------------------

struct FlexRow {
    std::string case_name;
    int label             = -1;
    int provider_identity = -1;
    double fidelity       = 0;
};

struct FlexResult {
    std::vector<FlexRow> rows;
    std::vector<std::string> image_paths;  // PPM grids, one per case
};

// Cases: {head}, {head, torso}, a two-identity mix (head from one identity,
// torso from another), and the empty subset (unconditional; scored only by
// finiteness/shape). Each provided part is scored against its providing
// identity's reference part.
FlexResult flexibility_eval(const Params& params, const RunConfig& rc, const std::string& corpus_dir,
                            const std::string& out_dir, uint64_t seed);

}  // namespace refdiff
