#include "emoface/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace emoface {

namespace {
std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<size_t>(shape_numel(shape_)), 0.0)) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::from(std::vector<double> values) {
    int n = static_cast<int>(values.size());
    return Tensor({n}, std::move(values));
}

Tensor Tensor::from(std::vector<double> values, std::vector<int> shape) {
    Tensor t(std::move(shape));
    if (t.numel() != static_cast<std::int64_t>(values.size()))
        throw ShapeError("Tensor::from: value count does not match shape");
    std::copy(values.begin(), values.end(), t.mut());
    return t;
}

std::int64_t Tensor::numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (shape_numel(shape) != numel())
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

int Tensor::rows2d() const {
    if (shape_.empty()) throw ShapeError("rows2d on scalar/empty tensor");
    int cols = shape_.back();
    if (cols == 0) return 0;
    return static_cast<int>(numel() / cols);
}

int Tensor::cols2d() const {
    if (shape_.empty()) throw ShapeError("cols2d on scalar/empty tensor");
    return shape_.back();
}

bool Tensor::all_finite() const {
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::sum() const { return std::accumulate(data_->begin(), data_->end(), 0.0); }
double Tensor::min() const { return *std::min_element(data_->begin(), data_->end()); }
double Tensor::max() const { return *std::max_element(data_->begin(), data_->end()); }

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}

Rng::Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
}

Rng::Rng(std::uint64_t s0, std::uint64_t s1, std::uint64_t s2, std::uint64_t s3) : s_{s0, s1, s2, s3} {
    if ((s0 | s1 | s2 | s3) == 0) s_[0] = 1;  // xoshiro forbids the all-zero state
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double a, double b) { return a + (b - a) * uniform(); }

double Rng::normal() {
    // Box-Muller without the cached spare so the generator state stays flat.
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw NumericError("uniform_int requires n > 0");
    // Rejection sampling for an unbiased draw.
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return static_cast<int>(v % un);
}

Rng Rng::child(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t x = seed;
    std::uint64_t h = splitmix64(x);
    for (std::uint64_t p : path) {
        x ^= p + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
        h ^= splitmix64(x);
    }
    return Rng(h);
}

std::vector<std::uint64_t> Rng::state() const { return {s_[0], s_[1], s_[2], s_[3]}; }

void Rng::set_state(const std::vector<std::uint64_t>& st) {
    if (st.size() != 4) throw ConfigError("rng state must have 4 words");
    for (int i = 0; i < 4; ++i) s_[i] = st[static_cast<size_t>(i)];
}

Tensor Rng::normal_tensor(std::vector<int> shape, double stddev) {
    Tensor t(std::move(shape));
    double* p = t.mut();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = stddev * normal();
    return t;
}

Tensor Rng::uniform_tensor(std::vector<int> shape, double a, double b) {
    Tensor t(std::move(shape));
    double* p = t.mut();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = uniform(a, b);
    return t;
}

}  // namespace emoface
