#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Dense>

namespace cosync::nn {

// Seeded generator whose draws are identical across standard libraries:
// only the raw mt19937_64 stream is used, distributions are computed here.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling keeps the draw unbiased.
        const std::uint64_t limit = n * (UINT64_MAX / n);
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return r % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c) {
            for (Eigen::Index r = 0; r < rows; ++r) {
                m(r, c) = stddev * normal();
            }
        }
        return m;
    }

    Eigen::MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c) {
            for (Eigen::Index r = 0; r < rows; ++r) {
                m(r, c) = uniform(lo, hi);
            }
        }
        return m;
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
        os.precision(17);
        os << std::hexfloat << spare_;
        return os.str();
    }

    void deserialize(const std::string& text) {
        std::istringstream is(text);
        int spare_flag = 0;
        std::string spare_text;
        is >> engine_ >> spare_flag >> spare_text;
        if (!is && !is.eof()) {
            throw std::runtime_error("rng state: malformed");
        }
        has_spare_ = spare_flag != 0;
        spare_ = std::strtod(spare_text.c_str(), nullptr);
    }

    bool operator==(const Rng& other) const {
        return engine_ == other.engine_ && has_spare_ == other.has_spare_ &&
               (!has_spare_ || spare_ == other.spare_);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace cosync::nn
