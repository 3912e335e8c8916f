#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace emoface {

// Error taxonomy. The CLI maps these onto exit codes; library code throws.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DependencyError : std::runtime_error {
    explicit DependencyError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major double tensor. Storage is shared between copies; tensors
// are treated as immutable once handed to another component.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value);
    static Tensor from(std::vector<double> values);  // 1-D
    static Tensor from(std::vector<double> values, std::vector<int> shape);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const;

    bool defined() const { return static_cast<bool>(data_); }
    const double* data() const { return data_->data(); }
    double* mut() { return data_->data(); }

    double at(std::int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    double at2(int r, int c) const { return (*data_)[static_cast<size_t>(r) * dim(1) + c]; }
    double& ref(std::int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    double& ref2(int r, int c) { return (*data_)[static_cast<size_t>(r) * dim(1) + c]; }

    // New tensor viewing the same storage with a different shape.
    Tensor reshaped(std::vector<int> shape) const;
    // Deep copy.
    Tensor clone() const;

    // Interpret as a 2-D matrix [rows, cols] where cols = last dimension.
    int rows2d() const;
    int cols2d() const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    double sum() const;
    double min() const;
    double max() const;

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

std::string shape_str(const std::vector<int>& s);
void check_same_shape(const Tensor& a, const Tensor& b, const char* where);

// xoshiro256** with splitmix64 seeding. Fully pinned by this file so runs
// are reproducible independent of the standard library's distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    Rng(std::uint64_t s0, std::uint64_t s1, std::uint64_t s2, std::uint64_t s3);

    std::uint64_t next_u64();
    double uniform();                    // [0, 1)
    double uniform(double a, double b);  // [a, b)
    double normal();                     // standard normal, Box-Muller
    int uniform_int(int n);              // [0, n)

    // Derive an independent stream for (seed, path...) so per-clip work can
    // be generated out of order and still be reproducible.
    static Rng child(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

    std::vector<std::uint64_t> state() const;
    void set_state(const std::vector<std::uint64_t>& st);

    Tensor normal_tensor(std::vector<int> shape, double stddev = 1.0);
    Tensor uniform_tensor(std::vector<int> shape, double a, double b);

private:
    std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& x);
std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace emoface
