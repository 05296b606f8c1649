#pragma once

#include <optional>
#include <string>
#include <vector>

#include "refdiff/attention.hpp"
#include "refdiff/image.hpp"
#include "refdiff/rng.hpp"
#include "refdiff/unet.hpp"

namespace refdiff {

// Parsing labels (per-pixel) and the class-label taxonomy they map to. The
// label vocabulary keeps all six taxonomy slots; the renderer produces four.
enum ParsingLabel : uint8_t { kBg = 0, kHead = 1, kTorso = 2, kLegs = 3, kFeet = 4 };

enum ClassLabel : int {
    kUpperBody = 0,
    kLowerBody = 1,
    kWholeBody = 2,  // reserved
    kHairHead  = 3,
    kFace      = 4,  // reserved
    kFootwear  = 5,
};

int class_label_for_parsing(ParsingLabel p);      // head->3, torso->0, legs->1, feet->5
const char* class_label_name(int label);

// Identity: renderable appearance attributes. Hues in [0,1); proportions in [0,1).
struct Identity {
    int id = 0;
    float head_hue = 0, torso_hue = 0, legs_hue = 0, feet_hue = 0;
    int torso_pattern = 0;  // 0 solid, 1 h-stripes, 2 v-stripes, 3 checker
    float prop_torso = 0.5f, prop_leg = 0.5f, prop_head = 0.5f;

    // attribute vector, attr_dim = 8
    Tensor attrs() const;
};

// 5 joint angles, radians.
struct FigPose {
    float lean = 0, l_thigh = 0, l_knee = 0, r_thigh = 0, r_knee = 0;
};

struct Sample {
    ImageU8 image;        // S x S x 3
    ImageU8 parsing;      // S x S x 1, labels {0..4}
    ImageU8 pose_raster;  // S x S x 3, colored skeleton bones
    FigPose pose;
    std::vector<std::pair<float, float>> keypoints;  // unit coords
};

Identity sample_identity(int id, Rng& rng);
FigPose sample_pose(Rng& rng);

// Deterministic given (identity, pose). Throws validation_error with a
// resample hint when the figure leaves the frame.
Sample render_sample(const Identity& ident, const FigPose& pose, int size);

// Parsing-guided part cropping: per class, tight bbox, 1px pad, squared,
// resampled onto a canvas (bilinear image, nearest mask), mid-gray outside the
// mask. Empty classes are omitted.
struct CroppedPart {
    RefPart part;
    ParsingLabel parsing_label;
    int src_x0 = 0, src_y0 = 0, src_size = 0;  // inverse-transform bookkeeping
};
std::vector<CroppedPart> crop_parts(const Sample& sample, int canvas = 32);

// Single-linkage grouping by pairwise cosine >= threshold. Returns group ids
// normalized to first-occurrence order.
std::vector<int> id_cleanse(const std::vector<std::vector<float>>& embeddings, double threshold = 0.9);

// Ordered same-identity different-pose pairs, optionally capped per identity.
struct PairIndex {
    int identity = 0;
    int a = 0, b = 0;  // sample indices within the identity
};
struct PairBuildReport {
    std::vector<PairIndex> pairs;
    int skipped_identities = 0;  // identities with < 2 samples
};
PairBuildReport build_pairs(const std::vector<int>& samples_per_identity, Rng& rng, int cap_per_identity = 0);

// Corpus generation: renders everything, writes PPM/PGM files + manifest under
// out_dir (atomically, via temp-dir rename). Split is by identity.
struct CorpusGenConfig {
    int n_identities  = 200;
    int poses_per_id  = 4;
    int size          = 32;
    uint64_t seed     = 1;
    double split_ratio = 0.95;  // train fraction
    int cap_per_identity = 0;
    double id_threshold  = 0.9;
    int part_canvas      = 32;
};
struct CorpusGenReport {
    int identities = 0, samples = 0, train_pairs = 0, test_pairs = 0;
    int skipped_identities = 0;
    int cleanse_groups     = 0;  // groups found by id cleansing (== identities when clean)
};
CorpusGenReport gen_corpus(const CorpusGenConfig& cfg, const std::string& out_dir);

// Manifest records: pair id, split, identity id, target path, pose path, then
// N triples of part path / mask path / label id. Tab-separated.
struct PairRecord {
    std::string pair_id;
    std::string split;
    int identity = 0;
    std::string target_path, pose_path;
    struct PartRef {
        std::string image_path, mask_path;
        int label = 0;
    };
    std::vector<PartRef> parts;
};
std::vector<PairRecord> read_manifest(const std::string& corpus_dir);

// Loads one pair into a training item: target latent + condition bundle
// (reference parts, pose raster, identity attributes).
struct LoadedPair {
    Tensor target_image;  // [1,3,S,S] in [0,1]
    ImageU8 target_parsing;
    ConditionBundle cond;
    int identity = 0;
    std::string pair_id;
};
LoadedPair load_pair(const std::string& corpus_dir, const PairRecord& rec);

}  // namespace refdiff
