#include "refdiff/train.hpp"

#include <charconv>
#include <chrono>
#include <ostream>

namespace refdiff {

namespace {

std::string fmt_float(float v) {
    char buf[48];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

bool params_finite(const Params& p) {
    for (const auto& [k, t] : p.t)
        if (!t.all_finite()) return false;
    return true;
}

}  // namespace

TrainOutcome train_loop(Params params, const TrainSettings& ts, const std::vector<TrainItem>& data,
                        std::ostream* log, const CheckpointSink& sink) {
    if (data.empty()) throw validation_error("train_loop: dataset is empty");
    ts.sched.validate();

    Rng rng(ts.seed);
    AdamState adam;
    float ema      = 0.0f;
    bool ema_init  = false;
    float last     = 0.0f;
    int last_saved = -1;

    if (ts.steps == 0)
        if (sink) sink(params, adam, 0, 0.0f);

    for (int step = 1; step <= ts.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();

        // batch assembly with an optional per-sample reference cap
        Rng pick = rng.split(0x6a7c, uint64_t(step));
        std::vector<TrainItem> batch;
        batch.reserve(size_t(ts.batch_size));
        for (int i = 0; i < ts.batch_size; ++i) {
            TrainItem item = data[size_t(pick.below(uint64_t(data.size())))];
            if (ts.max_refs > 0 && int(item.cond.refs.size()) > ts.max_refs) {
                std::vector<RefPart> kept;
                std::vector<size_t> idx(item.cond.refs.size());
                for (size_t j = 0; j < idx.size(); ++j) idx[j] = j;
                for (int j = 0; j < ts.max_refs; ++j) {
                    const size_t pos = size_t(pick.below(uint64_t(idx.size())));
                    kept.push_back(item.cond.refs[idx[pos]]);
                    idx.erase(idx.begin() + long(pos));
                }
                item.cond.refs = std::move(kept);
            }
            batch.push_back(std::move(item));
        }

        std::map<std::string, Tensor> grads;
        Rng step_rng = rng.split(0x57e9, uint64_t(step));
        last = training_loss(params, ts.net, batch, ts.sched, step_rng, ts.variant, ts.p_drop_all,
                             ts.p_drop_each, &grads, nullptr, ts.pose_stride);
        adam_update(params, adam, grads, ts.lr);

        if (!params_finite(params))
            throw numeric_error("non-finite parameters at step " + std::to_string(step) +
                                "; last good checkpoint at step " + std::to_string(last_saved));

        ema      = ema_init ? float(ts.ema_decay) * ema + (1.0f - float(ts.ema_decay)) * last : last;
        ema_init = true;

        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        if (log)
            (*log) << step << '\t' << fmt_float(last) << '\t' << fmt_float(ema) << '\t' << ms << '\n';

        if (sink && (step == ts.steps || (ts.ckpt_every > 0 && step % ts.ckpt_every == 0))) {
            sink(params, adam, step, ema);
            last_saved = step;
        }
    }

    TrainOutcome out;
    out.params     = std::move(params);
    out.adam       = std::move(adam);
    out.loss_ema   = ema;
    out.last_loss  = last;
    out.steps_done = ts.steps;
    return out;
}

}  // namespace refdiff
