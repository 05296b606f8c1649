#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refdiff/diffusion.hpp"
#include "refdiff/train.hpp"

namespace refdiff {

// ---------------------------------------------------------------------------
// Run configuration: every tunable, `key = value` text form, canonical emit
// (sorted keys), unknown keys rejected with a nearest-key suggestion.
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string preset = "tiny";  // tiny | base; expands net/schedule defaults

    // net
    int image_size = 32, base_channels = 16;
    std::vector<int> channel_mult     = {1, 2};
    std::vector<int> attn_resolutions = {16, 8};
    int heads = 4, token_dim = 32, temb_dim = 64;
    int label_vocab = 6, attr_dim = 8, caption_tokens = 4, ref_tokens = 4;
    int latent_packing = 1;

    // schedule
    int T             = 1000;
    double beta_start = 1e-4, beta_end = 2e-2;
    int t_subsample   = 5;  // tiny preset trains on the T/5 compressed schedule

    // sampler
    int ddim_steps        = 50;
    double guidance_scale = 2.0;  // paper-faithful 7.5 stays selectable
    double eta            = 0.0;

    // training
    double p_drop_all = 0.2, p_drop_each = 0.2;
    double lr = 1e-4;
    int batch_size = 8, steps = 2000, ckpt_every = 500;
    double ema_decay = 0.99;
    int max_refs     = 2;  // training-time cap; inference is uncapped
    std::string variant = "full";

    // corpus
    int corpus_ids = 200, corpus_poses = 4, corpus_size = 32;
    double split_ratio = 0.95;
    int pairs_cap      = 0;
    double id_threshold = 0.9;

    // misc
    uint64_t seed  = 1;
    int threads    = 1;
    int eval_pairs = 32;

    UNetConfig net_config() const {
        UNetConfig c;
        LatentCodec codec{latent_packing};
        c.image_size       = codec.latent_size(image_size);
        c.in_channels      = codec.latent_channels();
        c.base_channels    = base_channels;
        c.channel_mult     = channel_mult;
        c.attn_resolutions = attn_resolutions;
        c.heads            = heads;
        c.token_dim        = token_dim;
        c.temb_dim         = temb_dim;
        c.label_vocab      = label_vocab;
        c.attr_dim         = attr_dim;
        c.caption_tokens   = caption_tokens;
        c.ref_tokens       = ref_tokens;
        return c;
    }

    NoiseSchedule schedule() const {
        NoiseSchedule s = make_schedule(T, beta_start, beta_end);
        if (t_subsample > 1) s = subsample_schedule(s, T / t_subsample);
        return s;
    }

    SamplerConfig sampler() const { return SamplerConfig{ddim_steps, guidance_scale, eta}; }
    LatentCodec codec() const { return LatentCodec{latent_packing}; }
};

RunConfig parse_config(const std::string& text);
// Applies flag-style overrides ("key=value") on top of an existing config.
void apply_config_line(RunConfig& c, const std::string& key, const std::string& value);
std::string emit_config(const RunConfig& c);  // canonical: sorted keys
uint64_t config_hash(const RunConfig& c);
std::vector<std::string> config_keys();

// ---------------------------------------------------------------------------
// Checkpoints: bit-exact persistence of all four networks plus optimizer
// moments, RNG state, step counter, and the canonical config.
// ---------------------------------------------------------------------------

struct Checkpoint {
    uint32_t version = 1;
    Params params;
    Params adam_m, adam_v;
    std::array<uint64_t, 4> rng_state{};
    int64_t step         = 0;
    uint64_t config_hash = 0;
    std::string config_text;  // canonical serialized RunConfig
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// name -> (shape, fnv1a64 of payload bytes) for `inspect`
std::vector<std::tuple<std::string, Shape, uint64_t>> checkpoint_listing(const std::string& path);

}  // namespace refdiff
