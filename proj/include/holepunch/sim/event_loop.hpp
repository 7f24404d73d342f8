//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <utility>

namespace holepunch::sim {

/// Virtual nanoseconds since scenario start.
using SimTime = int64_t;

constexpr SimTime operator""_ms(unsigned long long v) { return static_cast<SimTime>(v) * 1'000'000; }
constexpr SimTime operator""_s(unsigned long long v) { return static_cast<SimTime>(v) * 1'000'000'000; }

/// Deterministic discrete-event scheduler. Events with equal fire time run
/// in scheduling order; the (time, seq) pair gives a total order, so two
/// runs of the same scenario execute identically.
class EventLoop {
public:
    using Action = std::function<void()>;

    struct EventHandle {
        SimTime fire_time = 0;
        uint64_t seq = 0;
    };

    SimTime now() const { return now_; }

    EventHandle schedule(SimTime delay, Action action) {
        if (delay < 0) throw std::invalid_argument("schedule: negative delay");
        EventHandle h{now_ + delay, next_seq_++};
        queue_.emplace(std::pair{h.fire_time, h.seq}, std::move(action));
        return h;
    }

    /// Cancels a pending event; a no-op if it already fired.
    void cancel(const EventHandle& h) { queue_.erase({h.fire_time, h.seq}); }

    /// Runs every event due at or before t, then advances the clock to t.
    size_t run_until(SimTime t) {
        if (t < now_) throw std::invalid_argument("run_until: time would go backward");
        size_t fired = 0;
        while (!queue_.empty() && queue_.begin()->first.first <= t) {
            auto it = queue_.begin();
            now_ = it->first.first;
            Action action = std::move(it->second);
            queue_.erase(it);
            action();
            ++fired;
        }
        now_ = t;
        return fired;
    }

    /// Drains the queue completely (with a safety cap on event count).
    size_t run_all(size_t max_events = 10'000'000) {
        size_t fired = 0;
        while (!queue_.empty()) {
            if (fired >= max_events) throw std::runtime_error("run_all: event cap exceeded");
            auto it = queue_.begin();
            now_ = it->first.first;
            Action action = std::move(it->second);
            queue_.erase(it);
            action();
            ++fired;
        }
        return fired;
    }

    bool idle() const { return queue_.empty(); }

private:
    SimTime now_ = 0;
    uint64_t next_seq_ = 0;
    std::map<std::pair<SimTime, uint64_t>, Action> queue_;
};

} // namespace holepunch::sim
