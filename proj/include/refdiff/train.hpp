#pragma once

#include <functional>
#include <iosfwd>

#include "refdiff/diffusion.hpp"

namespace refdiff {

struct TrainSettings {
    UNetConfig net;
    NoiseSchedule sched;
    Variant variant    = Variant::full;
    double p_drop_all  = 0.2;
    double p_drop_each = 0.2;
    double lr          = 1e-4;
    int batch_size     = 8;
    int steps          = 2000;
    int ckpt_every     = 500;
    uint64_t seed      = 1;
    double ema_decay   = 0.99;
    int max_refs       = 0;  // cap references per training sample; 0 = uncapped
    int pose_stride    = 1;
};

// Called at every checkpoint boundary (multiples of ckpt_every and the final
// step; a zero-step run emits the initial state).
using CheckpointSink = std::function<void(const Params&, const AdamState&, int step, float loss_ema)>;

struct TrainOutcome {
    Params params;
    AdamState adam;
    float loss_ema = 0.0f;
    float last_loss = 0.0f;
    int steps_done = 0;
};

// Adam training loop. Log gets one line per step: step, loss, loss_ema,
// wallclock_ms (tab-separated).
TrainOutcome train_loop(Params params, const TrainSettings& ts, const std::vector<TrainItem>& data,
                        std::ostream* log, const CheckpointSink& sink);

}  // namespace refdiff
