#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

namespace desk {

// Deterministic random source: xoshiro256++ seeded through splitmix64.
// The integer and uniform streams are fully specified by the seed and do not
// depend on the platform or the standard library, so experiments replay
// exactly. Normal deviates use the Marsaglia polar method (sqrt/log only).
//
// Sub-streams are derived by salting the seed with a label, which is how the
// pipeline gives every stage its own independently replayable stream.
class Rng {
  public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform();
    double uniform(double lo, double hi);

    // Unbiased integer in [0, n); n must be positive.
    int uniform_int(int n);

    // Standard normal deviate.
    double normal();
    double normal(double mean, double stddev);

    // Independent stream derived from this generator's seed and a label.
    Rng derive(std::string_view label) const;

    uint64_t seed() const { return seed_; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

  private:
    uint64_t seed_;
    std::array<uint64_t, 4> state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace desk
