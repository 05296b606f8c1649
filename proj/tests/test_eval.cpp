#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "refdiff/eval.hpp"

using namespace refdiff;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const char* name) {
    const auto p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p.string();
}

// small-net run config used by the integration-style tests
RunConfig small_rc(const std::string& variant) {
    RunConfig rc  = parse_config("base_channels = 8\nheads = 2\ntoken_dim = 16\nddim_steps = 2\n"
                                 "t_steps = 40\nt_subsample = 1\nguidance_scale = 2\nvariant = " +
                                 variant + "\n");
    return rc;
}

void make_ckpt(const std::string& path, const RunConfig& rc, uint64_t seed) {
    Checkpoint ck;
    ck.params      = init_params(rc.net_config(), seed);
    ck.config_text = emit_config(rc);
    ck.config_hash = config_hash(rc);
    save_checkpoint(ck, path);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("masked_mse closed forms") {
    Rng rng(1);
    Tensor target = Tensor::randn({1, 3, 8, 8}, rng, 0.2f);
    for (auto& v : target.data) v = std::clamp(v + 0.5f, 0.0f, 1.0f);
    ImageU8 parsing = ImageU8::filled(8, 8, 1, kBg);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 8; ++x) parsing.set(y, x, 0, kTorso);
    for (int y = 4; y < 8; ++y)
        for (int x = 0; x < 4; ++x) parsing.set(y, x, 0, kLegs);

    {
        double overall = -1;
        auto m = masked_mse(target, target, parsing, &overall);
        CHECK(m.at(kTorso) == 0.0);
        CHECK(m.at(kLegs) == 0.0);
        CHECK(overall == 0.0);
        CHECK(m.find(kHead) == m.end());  // empty region skipped
    }
    {
        Tensor gen = target;
        for (auto& v : gen.data) v += 0.1f;
        auto m = masked_mse(gen, target, parsing, nullptr);
        CHECK(m.at(kTorso) == doctest::Approx(0.01).epsilon(1e-4));
        CHECK(m.at(kLegs) == doctest::Approx(0.01).epsilon(1e-4));
    }
    {
        // Monte Carlo oracle: additive noise whose variance equals the region's
        // pixel variance gives masked_mse ~ that variance
        double mean = 0, var = 0;
        int64_t n = 0;
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 8; ++x)
                for (int c = 0; c < 3; ++c) {
                    mean += double(target[target.offset4(0, c, y, x)]);
                    ++n;
                }
        mean /= double(n);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 8; ++x)
                for (int c = 0; c < 3; ++c) {
                    const double d = double(target[target.offset4(0, c, y, x)]) - mean;
                    var += d * d;
                }
        var /= double(n);

        Rng noise_rng(7);
        double acc = 0;
        const int trials = 400;
        for (int trial = 0; trial < trials; ++trial) {
            Tensor gen = target;
            for (auto& v : gen.data) v += float(std::sqrt(var) * noise_rng.normal());
            acc += masked_mse(gen, target, parsing, nullptr).at(kTorso);
        }
        CHECK(acc / trials == doctest::Approx(var).epsilon(0.1));
    }
}

TEST_CASE("part_color_fidelity closed forms and channel-permutation symmetry") {
    ImageU8 parsing = ImageU8::filled(4, 4, 1, kBg);
    for (int x = 0; x < 4; ++x) parsing.set(0, x, 0, kTorso);

    auto flat_ref = [](float r, float g, float b) {
        RefPart ref;
        ref.image = Tensor(Shape{1, 3, 2, 2});
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                ref.image[ref.image.offset4(0, 0, y, x)] = r;
                ref.image[ref.image.offset4(0, 1, y, x)] = g;
                ref.image[ref.image.offset4(0, 2, y, x)] = b;
            }
        ref.mask = MaskLevel{2, 2, {1, 1, 1, 0}};
        ref.label = kUpperBody;
        return ref;
    };
    auto flat_gen = [](float r, float g, float b) {
        Tensor t(Shape{1, 3, 4, 4});
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                t[t.offset4(0, 0, y, x)] = r;
                t[t.offset4(0, 1, y, x)] = g;
                t[t.offset4(0, 2, y, x)] = b;
            }
        return t;
    };

    // exact mean-color match -> 1.0
    CHECK(*part_color_fidelity(flat_gen(0.3f, 0.6f, 0.9f), parsing, kTorso, flat_ref(0.3f, 0.6f, 0.9f)) ==
          doctest::Approx(1.0));
    // opposite corners of the RGB cube -> 0.0
    CHECK(*part_color_fidelity(flat_gen(0, 0, 0), parsing, kTorso, flat_ref(1, 1, 1)) ==
          doctest::Approx(0.0));
    // closed form: mid-gray vs saturated red = 1 - sqrt(0.75)/sqrt(3) = 0.5
    const double expected = 1.0 - std::sqrt(0.25 * 3.0) / std::sqrt(3.0);
    CHECK(expected == doctest::Approx(0.5));
    CHECK(*part_color_fidelity(flat_gen(0.5f, 0.5f, 0.5f), parsing, kTorso, flat_ref(1, 0, 0)) ==
          doctest::Approx(expected));

    // symmetric under a channel permutation applied to both inputs
    CHECK(*part_color_fidelity(flat_gen(0.2f, 0.5f, 0.8f), parsing, kTorso, flat_ref(0.9f, 0.1f, 0.4f)) ==
          doctest::Approx(
              *part_color_fidelity(flat_gen(0.8f, 0.2f, 0.5f), parsing, kTorso, flat_ref(0.4f, 0.9f, 0.1f))));

    // empty region skipped
    CHECK(!part_color_fidelity(flat_gen(1, 1, 1), parsing, kFeet, flat_ref(1, 1, 1)).has_value());
    RefPart empty_mask        = flat_ref(1, 1, 1);
    empty_mask.mask.keep      = {0, 0, 0, 0};
    CHECK(!part_color_fidelity(flat_gen(1, 1, 1), parsing, kTorso, empty_mask).has_value());
}

TEST_CASE("evaluate_checkpoint and ablation_run on zero-step models") {
    const std::string corpus = tmp_dir("eval_corpus");
    CorpusGenConfig cc;
    cc.n_identities = 4;
    cc.poses_per_id = 2;
    cc.size         = 32;
    cc.seed         = 5;
    cc.split_ratio  = 0.5;
    gen_corpus(cc, corpus);

    const std::string ckpts = tmp_dir("eval_ckpts");
    fs::create_directories(ckpts);
    for (const std::string v : {"full", "no_labels", "no_mask"})
        make_ckpt(ckpts + "/" + v + "_seed1.ckpt", small_rc(v), 77);  // identical init

    // determinism: the same evaluation twice gives identical reports
    {
        RunConfig rc = small_rc("full");
        Checkpoint ck = load_checkpoint(ckpts + "/full_seed1.ckpt");
        auto pairs    = read_manifest(corpus);
        std::vector<PairRecord> test_pairs;
        for (auto& p : pairs)
            if (p.split == "test") test_pairs.push_back(p);
        REQUIRE(!test_pairs.empty());
        auto r1 = evaluate_checkpoint(ck.params, rc, corpus, test_pairs, 3, "full");
        auto r2 = evaluate_checkpoint(ck.params, rc, corpus, test_pairs, 3, "full");
        REQUIRE(r1.rows.size() == r2.rows.size());
        for (size_t i = 0; i < r1.rows.size(); ++i) {
            CHECK(r1.rows[i].overall_mse == r2.rows[i].overall_mse);
            CHECK(r1.rows[i].mean_fidelity == r2.rows[i].mean_fidelity);
        }
        // report file writes
        const std::string rp = tmp_dir("eval_report") + ".tsv";
        r1.finalize();
        write_report(rp, r1);
        const std::string text = slurp(rp);
        CHECK(text.find("masked_mse_mean") != std::string::npos);
        fs::remove(rp);
    }

    // zero-step (identical) models: ordering verdict must be inconclusive
    {
        auto res = ablation_run(corpus, ckpts, {1}, 4);
        REQUIRE(res.verdicts.size() == 4);  // 2 variants x 2 metrics
        for (const auto& v : res.verdicts) CHECK(v.ci_verdict == "inconclusive");
        CHECK(res.reports.size() == 3);
    }

    // missing checkpoint is a hard error
    CHECK_THROWS_AS(ablation_run(corpus, ckpts, {2}, 4), io_error);

    // a variant whose config differs in more than the ablated component is rejected
    {
        RunConfig bad = small_rc("no_mask");
        bad.lr        = 0.5;  // second divergent line
        make_ckpt(ckpts + "/no_mask_seed1.ckpt", bad, 77);
        CHECK_THROWS_WITH_AS(ablation_run(corpus, ckpts, {1}, 4), doctest::Contains("exactly 1"),
                             validation_error);
    }

    fs::remove_all(corpus);
    fs::remove_all(ckpts);
}

TEST_CASE("flexibility_eval: subsets, mixes, provenance, reproducibility") {
    const std::string corpus = tmp_dir("flex_corpus");
    CorpusGenConfig cc;
    cc.n_identities = 4;
    cc.poses_per_id = 2;
    cc.size         = 32;
    cc.seed         = 9;
    cc.split_ratio  = 0.5;
    gen_corpus(cc, corpus);

    RunConfig rc = small_rc("full");
    Params p     = init_params(rc.net_config(), 31);

    const std::string out1 = tmp_dir("flex_out1");
    const std::string out2 = tmp_dir("flex_out2");
    auto r1 = flexibility_eval(p, rc, corpus, out1, 11);
    auto r2 = flexibility_eval(p, rc, corpus, out2, 11);

    // subset {head}: exactly one scored region, provided by the first identity
    int head_rows = 0;
    for (const auto& row : r1.rows)
        if (row.case_name == "subset_head") {
            ++head_rows;
            CHECK(row.label == kHairHead);
        }
    CHECK(head_rows == 1);

    // subset {head, torso}: two scored regions
    int ht_rows = 0;
    for (const auto& row : r1.rows)
        if (row.case_name == "subset_head_torso") ++ht_rows;
    CHECK(ht_rows == 2);

    // mix: head scored against identity A, torso against identity B, A != B
    int mix_head_ident = -1, mix_torso_ident = -1;
    for (const auto& row : r1.rows)
        if (row.case_name == "mix_two_identities") {
            if (row.label == kHairHead) mix_head_ident = row.provider_identity;
            if (row.label == kUpperBody) mix_torso_ident = row.provider_identity;
        }
    CHECK(mix_head_ident >= 0);
    CHECK(mix_torso_ident >= 0);
    CHECK(mix_head_ident != mix_torso_ident);
    // provenance matches the manifest identities of the two source pairs
    auto pairs = read_manifest(corpus);
    std::vector<PairRecord> test_pairs;
    for (auto& pr : pairs)
        if (pr.split == "test") test_pairs.push_back(pr);
    CHECK(mix_head_ident == test_pairs[0].identity);

    // byte-reproducible per seed: grids and reports identical across runs
    for (const auto& img : r1.image_paths) {
        const fs::path p1 = img;
        const fs::path p2 = fs::path(out2) / p1.filename();
        CHECK(slurp(p1) == slurp(p2));
    }
    CHECK(slurp(fs::path(out1) / "flexibility.tsv") == slurp(fs::path(out2) / "flexibility.tsv"));

    // empty subset produced an image too (unconditional branch)
    bool empty_case = false;
    for (const auto& img : r1.image_paths) empty_case = empty_case || img.find("empty_subset") != std::string::npos;
    CHECK(empty_case);

    fs::remove_all(corpus);
    fs::remove_all(out1);
    fs::remove_all(out2);
}
