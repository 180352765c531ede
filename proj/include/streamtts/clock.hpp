#pragma once

#include <chrono>
#include <cstdint>
#include <memory>

namespace streamtts {

// Injected monotonic clock so tests and the bench can run against a virtual
// timeline while synthesis uses the real one.
class Clock {
public:
    virtual ~Clock() = default;
    virtual uint64_t now_ns() = 0;
};

class SystemClock final : public Clock {
public:
    uint64_t now_ns() override {
        return static_cast<uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(
                std::chrono::steady_clock::now().time_since_epoch())
                .count());
    }
};

class VirtualClock final : public Clock {
public:
    uint64_t now_ns() override { return t_; }
    void advance_ns(uint64_t dt) { t_ += dt; }
    void set_ns(uint64_t t) { t_ = t; }

private:
    uint64_t t_ = 0;
};

}  // namespace streamtts
