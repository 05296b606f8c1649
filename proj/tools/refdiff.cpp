#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "refdiff/eval.hpp"
#include "refdiff/store.hpp"

using namespace refdiff;
namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;  // key -> value from flags
};

// defaults < config file < explicit flags
RunConfig resolve_config(const CommonOpts& c, const std::string& base_text = "") {
    RunConfig rc;
    if (!base_text.empty()) rc = parse_config(base_text);
    if (!c.config_path.empty()) {
        std::ifstream in(c.config_path);
        if (!in) throw io_error("cannot open config file: " + c.config_path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (base_text.empty()) {
            rc = parse_config(text);
        } else {
            std::istringstream lines(text);
            std::string line;
            while (std::getline(lines, line)) {
                const size_t hash = line.find('#');
                if (hash != std::string::npos) line = line.substr(0, hash);
                const size_t eq = line.find('=');
                if (eq == std::string::npos) continue;
                auto trim = [](std::string s) {
                    const size_t a = s.find_first_not_of(" \t\r");
                    const size_t b = s.find_last_not_of(" \t\r");
                    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
                };
                apply_config_line(rc, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
            }
        }
    }
    for (const auto& [k, v] : c.overrides) apply_config_line(rc, k, v);
    return rc;
}

void add_override_flag(CLI::App* cmd, CommonOpts& common, const std::string& flag, const std::string& key,
                       const std::string& help) {
    auto holder = std::make_shared<std::string>();
    cmd->add_option_function<std::string>(
           flag, [&common, key, holder](const std::string& v) { common.overrides.emplace_back(key, v); }, help)
        ->type_name("VALUE");
}

std::vector<TrainItem> load_training_items(const std::string& data_dir, const RunConfig& rc) {
    const LatentCodec codec = rc.codec();
    std::vector<TrainItem> items;
    for (const auto& rec : read_manifest(data_dir)) {
        if (rec.split != "train") continue;
        LoadedPair lp = load_pair(data_dir, rec);
        TrainItem item;
        item.z0   = codec.encode(lp.target_image);
        item.cond = std::move(lp.cond);
        items.push_back(std::move(item));
    }
    return items;
}

void save_train_ckpt(const std::string& path, const Params& params, const AdamState& adam, int step,
                     const RunConfig& rc, uint64_t seed) {
    Checkpoint ck;
    ck.params      = params;
    ck.adam_m.t    = adam.m;
    ck.adam_v.t    = adam.v;
    ck.step        = step;
    ck.rng_state   = Rng(seed).state();
    ck.config_text = emit_config(rc);
    ck.config_hash = config_hash(rc);
    save_checkpoint(ck, path);
}

int cmd_gen_data(const CommonOpts& common, const std::string& out_dir) {
    RunConfig rc = resolve_config(common);
    CorpusGenConfig cc;
    cc.n_identities     = rc.corpus_ids;
    cc.poses_per_id     = rc.corpus_poses;
    cc.size             = rc.corpus_size;
    cc.seed             = rc.seed;
    cc.split_ratio      = rc.split_ratio;
    cc.cap_per_identity = rc.pairs_cap;
    cc.id_threshold     = rc.id_threshold;
    auto rep = gen_corpus(cc, out_dir);
    std::cout << "corpus: " << rep.identities << " identities, " << rep.samples << " samples, "
              << rep.train_pairs << " train pairs, " << rep.test_pairs << " test pairs, "
              << rep.cleanse_groups << " cleansed groups";
    if (rep.skipped_identities) std::cout << ", " << rep.skipped_identities << " identities skipped";
    std::cout << "\n";
    return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data_dir, const std::string& ckpt_out) {
    RunConfig rc = resolve_config(common);
    fs::create_directories(ckpt_out);

    TrainSettings ts;
    ts.net         = rc.net_config();
    ts.sched       = rc.schedule();
    ts.variant     = variant_from_name(rc.variant);
    ts.p_drop_all  = rc.p_drop_all;
    ts.p_drop_each = rc.p_drop_each;
    ts.lr          = rc.lr;
    ts.batch_size  = rc.batch_size;
    ts.steps       = rc.steps;
    ts.ckpt_every  = rc.ckpt_every;
    ts.seed        = rc.seed;
    ts.ema_decay   = rc.ema_decay;
    ts.max_refs    = rc.max_refs;
    ts.pose_stride = rc.latent_packing;

    auto items = load_training_items(data_dir, rc);
    Params params = init_params(ts.net, rc.seed, rc.latent_packing);

    std::ofstream log(fs::path(ckpt_out) / "train.log");
    auto sink = [&](const Params& p, const AdamState& a, int step, float) {
        save_train_ckpt((fs::path(ckpt_out) / ("ckpt_" + std::to_string(step) + ".ckpt")).string(), p, a,
                        step, rc, rc.seed);
    };
    auto outcome = train_loop(std::move(params), ts, items, &log, sink);
    save_train_ckpt((fs::path(ckpt_out) / "final.ckpt").string(), outcome.params, outcome.adam,
                    outcome.steps_done, rc, rc.seed);
    std::cout << "trained " << outcome.steps_done << " steps, loss_ema " << outcome.loss_ema << "\n";
    return 0;
}

RefPart parse_ref_spec(const std::string& spec) {
    // part=path:mask=path:label=L
    std::string img, mask;
    int label = -1;
    size_t pos = 0;
    while (pos < spec.size()) {
        size_t next = spec.find(':', pos);
        if (next == std::string::npos) next = spec.size();
        const std::string field = spec.substr(pos, next - pos);
        const size_t eq         = field.find('=');
        if (eq == std::string::npos) throw config_error("bad --ref field '" + field + "'");
        const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "part")
            img = value;
        else if (key == "mask")
            mask = value;
        else if (key == "label")
            label = std::stoi(value);
        else
            throw config_error("unknown --ref field '" + key + "' (expected part|mask|label)");
        pos = next + 1;
    }
    if (img.empty() || mask.empty() || label < 0)
        throw config_error("--ref needs part=path:mask=path:label=L");
    RefPart rp;
    rp.image        = image_to_tensor(read_pnm(img));
    const ImageU8 m = read_pnm(mask);
    rp.mask.h       = m.height;
    rp.mask.w       = m.width;
    rp.mask.keep.resize(size_t(m.width) * m.height);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) rp.mask.keep[size_t(y) * m.width + x] = uint8_t(m.at(y, x) > 0);
    rp.label = label;
    return rp;
}

int cmd_sample(const CommonOpts& common, const std::string& ckpt_path, const std::string& data_dir,
               const std::string& pair_id, const std::vector<std::string>& ref_specs,
               const std::string& pose_path, const std::vector<int>& drop_parts, const std::string& out_dir) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    RunConfig rc  = resolve_config(common, ck.config_text);

    ConditionBundle cond;
    std::string tag = "custom";
    if (!pair_id.empty()) {
        if (data_dir.empty()) throw config_error("--pair-id needs --data");
        bool found = false;
        for (const auto& rec : read_manifest(data_dir)) {
            if (rec.pair_id != pair_id) continue;
            cond  = load_pair(data_dir, rec).cond;
            found = true;
            break;
        }
        if (!found) throw validation_error("pair id '" + pair_id + "' not found in manifest");
        tag = pair_id;
    } else {
        for (const auto& spec : ref_specs) cond.refs.push_back(parse_ref_spec(spec));
        if (!pose_path.empty()) cond.pose = image_to_tensor(read_pnm(pose_path));
    }
    for (int lab : drop_parts) {
        std::vector<RefPart> kept;
        for (auto& r : cond.refs)
            if (r.label != lab) kept.push_back(std::move(r));
        cond.refs = std::move(kept);
    }

    fs::create_directories(out_dir);
    Rng rng(rc.seed);
    auto res = ddim_sample(ck.params, rc.net_config(), cond, rc.schedule(), rc.sampler(), rng, rc.codec(),
                           variant_from_name(rc.variant), rc.p_drop_all > 0.0, nullptr, rc.latent_packing);
    const std::string path =
        (fs::path(out_dir) / ("sample_" + tag + "_seed" + std::to_string(rc.seed) + ".ppm")).string();
    write_ppm(path, tensor_to_image(res.image));
    std::cout << path << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& ckpt_path, const std::string& data_dir,
             const std::string& split, const std::string& report_path) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    RunConfig rc  = resolve_config(common, ck.config_text);

    std::vector<PairRecord> pairs;
    for (const auto& rec : read_manifest(data_dir))
        if (rec.split == split) pairs.push_back(rec);
    if (pairs.empty()) throw validation_error("no pairs in split '" + split + "'");
    if (rc.eval_pairs > 0 && int(pairs.size()) > rc.eval_pairs) pairs.resize(size_t(rc.eval_pairs));

    EvalReport rep = evaluate_checkpoint(ck.params, rc, data_dir, pairs, rc.seed, rc.variant);
    write_report(report_path, rep);
    std::cout << "evaluated " << rep.sample_count << " pairs: masked_mse " << rep.mse_mean
              << " +- " << rep.mse_std << ", part_color_fidelity " << rep.fid_mean << " +- " << rep.fid_std
              << "\n";
    return 0;
}

int cmd_inspect(const std::string& ckpt_path) {
    for (const auto& [name, shape, sum] : checkpoint_listing(ckpt_path)) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)sum);
        std::cout << name << "\t" << shape_str(shape) << "\t" << buf << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"reference-conditioned diffusion at desk scale"};
    app.require_subcommand(1);

    CommonOpts common;
    int threads = 1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", common.config_path, "config file (key = value lines)");
        add_override_flag(cmd, common, "--seed", "seed", "master seed (default 1)");
        cmd->add_option("--threads", threads, "worker cap (default 1)");
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the figures-from-parts corpus");
    std::string out_dir;
    gen->add_option("--out", out_dir, "output corpus directory")->required();
    add_common(gen);
    add_override_flag(gen, common, "--ids", "corpus_ids", "number of identities (default 200)");
    add_override_flag(gen, common, "--poses", "corpus_poses", "poses per identity (default 4)");
    add_override_flag(gen, common, "--size", "corpus_size", "image size, 32 or 64 (default 32)");
    add_override_flag(gen, common, "--split", "split_ratio", "train fraction by identity (default 0.95)");
    add_override_flag(gen, common, "--cap", "pairs_cap", "max pairs per identity, 0 = all (default 0)");

    // train
    auto* train = app.add_subcommand("train", "train the denoiser and appearance encoder");
    std::string data_dir, ckpt_out;
    train->add_option("--data", data_dir, "corpus directory")->required();
    train->add_option("--ckpt-out", ckpt_out, "checkpoint output directory")->required();
    add_common(train);
    add_override_flag(train, common, "--steps", "steps", "training steps (default 2000)");
    add_override_flag(train, common, "--variant", "variant", "full|no_labels|no_mask (default full)");
    add_override_flag(train, common, "--batch", "batch_size", "batch size (default preset)");
    add_override_flag(train, common, "--lr", "lr", "learning rate (default 1e-4)");
    add_override_flag(train, common, "--ckpt-every", "ckpt_every", "checkpoint interval (default 500)");

    // sample
    auto* sample = app.add_subcommand("sample", "generate images from a checkpoint");
    std::string ckpt_path, pair_id, pose_path, sample_out;
    std::vector<std::string> ref_specs;
    std::vector<int> drop_parts;
    sample->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    sample->add_option("--data", data_dir, "corpus directory (for --pair-id)");
    sample->add_option("--pair-id", pair_id, "condition on a manifest pair");
    sample->add_option("--ref", ref_specs, "explicit reference: part=path:mask=path:label=L (repeatable)");
    sample->add_option("--pose", pose_path, "pose raster PPM");
    sample->add_option("--drop-part", drop_parts, "drop references with this class label (repeatable)");
    sample->add_option("--out", sample_out, "output directory")->required();
    add_common(sample);
    add_override_flag(sample, common, "--guidance", "guidance_scale", "guidance scale (default 2.0)");
    add_override_flag(sample, common, "--steps", "ddim_steps", "DDIM steps (default 50)");

    // eval
    auto* eval = app.add_subcommand("eval", "score a checkpoint against ground-truth pairs");
    std::string split = "test", report_path;
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "corpus directory")->required();
    eval->add_option("--split", split, "manifest split (default test)");
    eval->add_option("--report", report_path, "report output file")->required();
    add_common(eval);
    add_override_flag(eval, common, "--max-pairs", "eval_pairs", "cap evaluated pairs (default 32)");

    // inspect
    auto* inspect = app.add_subcommand("inspect", "list checkpoint tensors and checksums");
    inspect->add_option("--ckpt", ckpt_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(common, out_dir);
        if (train->parsed()) return cmd_train(common, data_dir, ckpt_out);
        if (sample->parsed())
            return cmd_sample(common, ckpt_path, data_dir, pair_id, ref_specs, pose_path, drop_parts,
                              sample_out);
        if (eval->parsed()) return cmd_eval(common, ckpt_path, data_dir, split, report_path);
        if (inspect->parsed()) return cmd_inspect(ckpt_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
