#pragma once

namespace mcl {

// Per-training-phase performance summary handed to the schedulers and
// rendered into follow-up prompts. Times are in seconds.
struct PerfMetrics {
    double mean_return = 0.0;
    double avg_travel_time = 0.0;
    double throughput = 0.0;
    double avg_wait_time = 0.0;
    double avg_delay = 0.0;

    bool operator==(const PerfMetrics&) const = default;
};

}  // namespace mcl
