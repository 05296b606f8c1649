#include "refdiff/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace refdiff {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
    mean = 0;
    sd   = 0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    for (double x : xs) sd += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(sd / double(xs.size() - 1)) : 0.0;
}

}  // namespace

ParsingLabel parsing_label_for_class(int class_label) {
    switch (class_label) {
        case kHairHead: return kHead;
        case kUpperBody: return kTorso;
        case kLowerBody: return kLegs;
        case kFootwear: return kFeet;
        default: throw validation_error("class label " + std::to_string(class_label) + " has no parsing region");
    }
}

std::map<int, double> masked_mse(const Tensor& generated, const Tensor& target, const ImageU8& parsing,
                                 double* figure_wide) {
    if (!generated.same_shape(target))
        throw dimension_error("masked_mse shapes differ: " + shape_str(generated.shape) + " vs " +
                              shape_str(target.shape));
    const int h = generated.dim(2), w = generated.dim(3);
    if (parsing.height != h || parsing.width != w)
        throw dimension_error("parsing map size does not match images");

    std::map<int, double> sums;
    std::map<int, int64_t> counts;
    double fig_sum = 0;
    int64_t fig_n  = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const uint8_t lab = parsing.at(y, x);
            if (lab == kBg) continue;
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = double(generated[generated.offset4(0, c, y, x)]) -
                                 double(target[target.offset4(0, c, y, x)]);
                d2 += d * d;
            }
            d2 /= 3.0;
            sums[lab] += d2;
            counts[lab] += 1;
            fig_sum += d2;
            fig_n += 1;
        }
    std::map<int, double> out;
    for (const auto& [lab, s] : sums) out[lab] = s / double(counts[lab]);
    if (figure_wide) *figure_wide = fig_n > 0 ? fig_sum / double(fig_n) : 0.0;
    return out;
}

std::optional<double> part_color_fidelity(const Tensor& generated, const ImageU8& target_parsing,
                                          ParsingLabel region, const RefPart& ref) {
    const int h = generated.dim(2), w = generated.dim(3);
    double gen_mean[3] = {0, 0, 0};
    int64_t n          = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (target_parsing.at(y, x) == region) {
                for (int c = 0; c < 3; ++c) gen_mean[c] += double(generated[generated.offset4(0, c, y, x)]);
                ++n;
            }
    if (n == 0) return std::nullopt;  // empty region: skipped

    double ref_mean[3] = {0, 0, 0};
    int64_t m          = 0;
    const int rh = ref.image.dim(2), rw = ref.image.dim(3);
    for (int y = 0; y < rh; ++y)
        for (int x = 0; x < rw; ++x)
            if (ref.mask.keep[size_t(y) * rw + x]) {
                for (int c = 0; c < 3; ++c) ref_mean[c] += double(ref.image[ref.image.offset4(0, c, y, x)]);
                ++m;
            }
    if (m == 0) return std::nullopt;

    double d2 = 0;
    for (int c = 0; c < 3; ++c) {
        const double d = gen_mean[c] / double(n) - ref_mean[c] / double(m);
        d2 += d * d;
    }
    return 1.0 - std::sqrt(d2) / std::sqrt(3.0);
}

void EvalReport::finalize() {
    std::vector<double> mses, fids;
    for (const auto& r : rows) {
        mses.push_back(r.overall_mse);
        int k = 0;
        for (const auto& p : r.parts) k += p.fidelity_valid;
        if (k > 0) fids.push_back(r.mean_fidelity);
    }
    mean_std(mses, mse_mean, mse_std);
    mean_std(fids, fid_mean, fid_std);
    sample_count = int(rows.size());
}

void write_report(const std::string& path, const EvalReport& rep) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write report: " + path);
    out << "pair_id\toverall_mse\tmean_fidelity";
    for (int lab : {kUpperBody, kLowerBody, kHairHead, kFootwear})
        out << "\tmse_" << class_label_name(lab) << "\tfid_" << class_label_name(lab);
    out << "\n";
    for (const auto& r : rep.rows) {
        out << r.pair_id << '\t' << fmt(r.overall_mse) << '\t' << fmt(r.mean_fidelity);
        for (int lab : {kUpperBody, kLowerBody, kHairHead, kFootwear}) {
            const PartScore* found = nullptr;
            for (const auto& p : r.parts)
                if (p.label == lab) found = &p;
            if (found) {
                out << '\t' << fmt(found->mse) << '\t'
                    << (found->fidelity_valid ? fmt(found->fidelity) : "-");
            } else {
                out << "\t-\t-";
            }
        }
        out << '\n';
    }
    out << "# summary\n";
    out << "# variant = " << rep.variant_tag << "\n";
    out << "# seed = " << rep.seed << "\n";
    out << "# sample_count = " << rep.sample_count << "\n";
    out << "# masked_mse_mean = " << fmt(rep.mse_mean) << " +- " << fmt(rep.mse_std) << "\n";
    out << "# part_color_fidelity_mean = " << fmt(rep.fid_mean) << " +- " << fmt(rep.fid_std) << "\n";
}

EvalReport evaluate_checkpoint(const Params& params, const RunConfig& rc, const std::string& corpus_dir,
                               const std::vector<PairRecord>& pairs, uint64_t seed,
                               const std::string& variant_tag) {
    EvalReport rep;
    rep.variant_tag = variant_tag;
    rep.seed        = seed;
    const UNetConfig cfg  = rc.net_config();
    const NoiseSchedule s = rc.schedule();
    const LatentCodec codec = rc.codec();
    const Variant variant   = variant_from_name(rc.variant);
    const SamplerConfig sc  = rc.sampler();

    for (size_t i = 0; i < pairs.size(); ++i) {
        LoadedPair lp = load_pair(corpus_dir, pairs[i]);
        Rng rng(Rng(seed).split(0xe7a1, uint64_t(i)).next_u64());
        auto res = ddim_sample(params, cfg, lp.cond, s, sc, rng, codec, variant, rc.p_drop_all > 0.0,
                               nullptr, rc.latent_packing);

        PairScore ps;
        ps.pair_id = lp.pair_id;
        auto mses  = masked_mse(res.image, lp.target_image, lp.target_parsing, &ps.overall_mse);
        double fid_sum = 0;
        int fid_n      = 0;
        for (const auto& ref : lp.cond.refs) {
            PartScore part;
            part.label              = ref.label;
            const ParsingLabel parl = parsing_label_for_class(ref.label);
            auto it                 = mses.find(parl);
            part.mse                = it != mses.end() ? it->second : 0.0;
            auto fid                = part_color_fidelity(res.image, lp.target_parsing, parl, ref);
            if (fid) {
                part.fidelity       = *fid;
                part.fidelity_valid = true;
                fid_sum += *fid;
                ++fid_n;
            }
            ps.parts.push_back(part);
        }
        ps.mean_fidelity = fid_n > 0 ? fid_sum / fid_n : 0.0;
        rep.rows.push_back(std::move(ps));
    }
    rep.finalize();
    return rep;
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

namespace {

int config_line_diff(const std::string& a, const std::string& b) {
    std::istringstream ia(a), ib(b);
    std::string la, lb;
    int diff = 0;
    while (true) {
        const bool ga = bool(std::getline(ia, la));
        const bool gb = bool(std::getline(ib, lb));
        if (!ga && !gb) break;
        if (!ga || !gb || la != lb) ++diff;
    }
    return diff;
}

}  // namespace

AblationResult ablation_run(const std::string& corpus_dir, const std::string& ckpt_dir,
                            const std::vector<uint64_t>& seeds, int budget_pairs) {
    const std::vector<std::string> variants = {"full", "no_labels", "no_mask"};
    auto all_pairs = read_manifest(corpus_dir);
    std::vector<PairRecord> held_out;
    for (auto& p : all_pairs)
        if (p.split == "test") held_out.push_back(p);
    if (held_out.empty()) throw validation_error("ablation_run: no held-out (test) pairs in corpus");
    if (budget_pairs > 0 && int(held_out.size()) > budget_pairs)
        held_out.resize(size_t(budget_pairs));

    AblationResult out;
    for (uint64_t seed : seeds) {
        std::map<std::string, EvalReport> by_variant;
        std::map<std::string, std::string> cfg_text;
        for (const auto& v : variants) {
            const std::string path =
                (fs::path(ckpt_dir) / (v + "_seed" + std::to_string(seed) + ".ckpt")).string();
            if (!fs::exists(path)) throw io_error("ablation variant checkpoint missing: " + path);
            Checkpoint ck = load_checkpoint(path);
            RunConfig rc  = parse_config(ck.config_text);
            if (rc.variant != v)
                throw validation_error("checkpoint " + path + " trained as variant '" + rc.variant + "'");
            cfg_text[v] = ck.config_text;
            by_variant.emplace(v, evaluate_checkpoint(ck.params, rc, corpus_dir, held_out, seed, v));
        }
        // the harness must change exactly one component per variant
        for (const auto& v : {std::string("no_labels"), std::string("no_mask")}) {
            const int d = config_line_diff(cfg_text.at("full"), cfg_text.at(v));
            if (d != 1)
                throw validation_error("variant '" + v + "' config differs from full in " + std::to_string(d) +
                                       " lines; expected exactly 1");
        }

        const EvalReport& full = by_variant.at("full");
        for (const auto& v : {std::string("no_labels"), std::string("no_mask")}) {
            const EvalReport& var = by_variant.at(v);
            const double n        = std::max(1, full.sample_count);
            auto overlap = [&](double m1, double s1, double m2, double s2) {
                const double half1 = 1.96 * s1 / std::sqrt(n), half2 = 1.96 * s2 / std::sqrt(n);
                return std::abs(m1 - m2) <= half1 + half2;
            };
            AblationVerdict fid;
            fid.metric           = "part_color_fidelity";
            fid.variant          = v;
            fid.seed             = seed;
            fid.full_value       = full.fid_mean;
            fid.variant_value    = var.fid_mean;
            fid.full_better_mean = full.fid_mean > var.fid_mean;
            fid.ci_verdict       = overlap(full.fid_mean, full.fid_std, var.fid_mean, var.fid_std)
                                       ? "inconclusive"
                                       : (fid.full_better_mean ? "full_better" : "variant_better");
            out.verdicts.push_back(fid);

            AblationVerdict mse;
            mse.metric           = "masked_mse";
            mse.variant          = v;
            mse.seed             = seed;
            mse.full_value       = full.mse_mean;
            mse.variant_value    = var.mse_mean;
            mse.full_better_mean = full.mse_mean < var.mse_mean;
            mse.ci_verdict       = overlap(full.mse_mean, full.mse_std, var.mse_mean, var.mse_std)
                                       ? "inconclusive"
                                       : (mse.full_better_mean ? "full_better" : "variant_better");
            out.verdicts.push_back(mse);
        }
        for (const auto& v : variants) out.reports.push_back(by_variant.at(v));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Flexibility
// ---------------------------------------------------------------------------

FlexResult flexibility_eval(const Params& params, const RunConfig& rc, const std::string& corpus_dir,
                            const std::string& out_dir, uint64_t seed) {
    const UNetConfig cfg    = rc.net_config();
    const NoiseSchedule s   = rc.schedule();
    const LatentCodec codec = rc.codec();
    const Variant variant   = variant_from_name(rc.variant);
    const SamplerConfig sc  = rc.sampler();

    auto all = read_manifest(corpus_dir);
    std::vector<PairRecord> pool;
    for (auto& p : all)
        if (p.split == "test") pool.push_back(p);
    if (pool.size() < 2) throw validation_error("flexibility_eval needs at least two held-out pairs");
    // two pairs from distinct identities for the mix case
    size_t second = 1;
    while (second < pool.size() && pool[second].identity == pool[0].identity) ++second;
    if (second == pool.size())
        throw validation_error("flexibility_eval needs two distinct identities in the test split");

    LoadedPair a = load_pair(corpus_dir, pool[0]);
    LoadedPair b = load_pair(corpus_dir, pool[second]);

    auto find_ref = [](const LoadedPair& lp, int label) -> const RefPart* {
        for (const auto& r : lp.cond.refs)
            if (r.label == label) return &r;
        return nullptr;
    };

    struct Case {
        std::string name;
        ConditionBundle cond;
        std::vector<std::pair<const RefPart*, int>> scored;  // (part, provider identity)
        const LoadedPair* region_source = nullptr;
    };
    std::vector<Case> cases;

    {
        Case c;
        c.name          = "subset_head";
        c.region_source = &a;
        if (const RefPart* head = find_ref(a, kHairHead)) {
            c.cond.refs.push_back(*head);
            c.scored.emplace_back(&c.cond.refs.back(), a.identity);
        }
        c.cond.pose  = a.cond.pose;
        c.cond.attrs = a.cond.attrs;
        cases.push_back(std::move(c));
    }
    {
        Case c;
        c.name          = "subset_head_torso";
        c.region_source = &a;
        for (int lab : {kHairHead, kUpperBody})
            if (const RefPart* p = find_ref(a, lab)) {
                c.cond.refs.push_back(*p);
            }
        for (auto& r : c.cond.refs) c.scored.emplace_back(&r, a.identity);
        c.cond.pose  = a.cond.pose;
        c.cond.attrs = a.cond.attrs;
        cases.push_back(std::move(c));
    }
    {
        // cross-identity mix: head from identity A, torso from identity B
        Case c;
        c.name          = "mix_two_identities";
        c.region_source = &a;
        if (const RefPart* head = find_ref(a, kHairHead)) c.cond.refs.push_back(*head);
        if (const RefPart* torso = find_ref(b, kUpperBody)) c.cond.refs.push_back(*torso);
        for (auto& r : c.cond.refs)
            c.scored.emplace_back(&r, r.label == kHairHead ? a.identity : b.identity);
        c.cond.pose = a.cond.pose;  // caption dropped: the mixed identity has no single attribute vector
        cases.push_back(std::move(c));
    }
    {
        Case c;  // empty subset: unconditional generation, scored by finiteness/shape only
        c.name          = "empty_subset";
        c.region_source = &a;
        cases.push_back(std::move(c));
    }

    fs::create_directories(out_dir);
    FlexResult out;
    std::ofstream report(fs::path(out_dir) / "flexibility.tsv");
    report << "case\tlabel\tprovider_identity\tfidelity\n";
    for (size_t ci = 0; ci < cases.size(); ++ci) {
        Case& c = cases[ci];
        Rng rng(Rng(seed).split(0xf1e0, uint64_t(ci)).next_u64());
        auto res = ddim_sample(params, cfg, c.cond, s, sc, rng, codec, variant, rc.p_drop_all > 0.0, nullptr,
                               rc.latent_packing);
        if (!res.image.all_finite()) throw numeric_error("flexibility sample is not finite");

        std::vector<ImageU8> tiles;
        tiles.push_back(tensor_to_image(res.image));
        for (const auto& [part, ident] : c.scored) tiles.push_back(tensor_to_image(part->image));
        const std::string img_path = (fs::path(out_dir) / (c.name + ".ppm")).string();
        write_ppm(img_path, make_grid(tiles, int(tiles.size())));
        out.image_paths.push_back(img_path);

        for (const auto& [part, ident] : c.scored) {
            auto fid = part_color_fidelity(res.image, c.region_source->target_parsing,
                                           parsing_label_for_class(part->label), *part);
            FlexRow row;
            row.case_name         = c.name;
            row.label             = part->label;
            row.provider_identity = ident;
            row.fidelity          = fid.value_or(0.0);
            out.rows.push_back(row);
            report << c.name << '\t' << part->label << '\t' << ident << '\t' << fmt(row.fidelity) << '\n';
        }
    }
    return out;
}

}  // namespace refdiff
