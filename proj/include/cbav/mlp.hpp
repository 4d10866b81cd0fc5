#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace cbav {

enum class OutputActivation { none, logistic };

namespace detail {
inline std::uint64_t next_mlp_version() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

// Fully connected network with (leaky) rectifiers between layers. Inputs and
// activations are stored column-per-sample so a batch is one GEMM per layer.
template <typename Scalar>
class Mlp {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Layer {
    Matrix weight;  // out x in
    Vector bias;
  };

  struct Tape {
    std::vector<Matrix> activations;  // input, hidden activations, output
    std::uint64_t version = 0;
    int batch() const { return activations.empty() ? 0 : static_cast<int>(activations.front().cols()); }
    const Matrix& output() const { return activations.back(); }
  };

  struct Gradient {
    std::vector<Layer> layers;
    Matrix input;  // d loss / d input, one column per sample

    Vector pack() const {
      Vector out(count());
      Eigen::Index k = 0;
      for (const auto& l : layers) {
        out.segment(k, l.weight.size()) = Eigen::Map<const Vector>(l.weight.data(), l.weight.size());
        k += l.weight.size();
        out.segment(k, l.bias.size()) = l.bias;
        k += l.bias.size();
      }
      return out;
    }
    Eigen::Index count() const {
      Eigen::Index n = 0;
      for (const auto& l : layers) n += l.weight.size() + l.bias.size();
      return n;
    }
    void add(const Gradient& other) {
      if (layers.empty()) {
        layers = other.layers;
        return;
      }
      for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].weight += other.layers[i].weight;
        layers[i].bias += other.layers[i].bias;
      }
    }
  };

  Mlp() = default;

  // Zero-initialised network with the given layer widths (input first).
  Mlp(const std::vector<int>& widths, OutputActivation output, Scalar negative_slope = 0)
      : output_(output), negative_slope_(negative_slope), version_(detail::next_mlp_version()) {
    if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
    for (int w : widths)
      if (w < 1) throw std::invalid_argument("Mlp: widths must be positive");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      layers_.push_back({Matrix::Zero(widths[i + 1], widths[i]), Vector::Zero(widths[i + 1])});
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
  static Mlp random(const std::vector<int>& widths, OutputActivation output, std::uint64_t seed,
                    Scalar negative_slope = 0) {
    Mlp net(widths, output, negative_slope);
    std::mt19937_64 rng(seed);
    for (auto& l : net.layers_) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = static_cast<Scalar>(u(rng));
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = static_cast<Scalar>(u(rng));
    }
    return net;
  }

  const std::vector<Layer>& layers() const { return layers_; }
  // Mutable access invalidates outstanding tapes.
  Layer& layer(int i) {
    touch();
    return layers_.at(i);
  }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  int input_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
  int output_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }
  OutputActivation output_activation() const { return output_; }
  Scalar negative_slope() const { return negative_slope_; }
  std::uint64_t version() const { return version_; }
  void touch() { version_ = detail::next_mlp_version(); }

  Eigen::Index num_params() const {
    Eigen::Index n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  // Parameters in layer order, each weight column-major followed by its bias.
  Vector pack() const {
    Vector out(num_params());
    Eigen::Index k = 0;
    for (const auto& l : layers_) {
      out.segment(k, l.weight.size()) = Eigen::Map<const Vector>(l.weight.data(), l.weight.size());
      k += l.weight.size();
      out.segment(k, l.bias.size()) = l.bias;
      k += l.bias.size();
    }
    return out;
  }

  void unpack(const Vector& params) {
    if (params.size() != num_params()) throw std::invalid_argument("Mlp::unpack: parameter count mismatch");
    Eigen::Index k = 0;
    for (auto& l : layers_) {
      Eigen::Map<Vector>(l.weight.data(), l.weight.size()) = params.segment(k, l.weight.size());
      k += l.weight.size();
      l.bias = params.segment(k, l.bias.size());
      k += l.bias.size();
    }
    touch();
  }

  Matrix forward(const Matrix& x) const {
    Tape tape;
    run(x, tape, false);
    return std::move(tape.activations.back());
  }

  Matrix forward(const Matrix& x, Tape& tape) const {
    run(x, tape, true);
    return tape.activations.back();
  }

  // Reverse pass for d loss / d output. Rectifier slope at exactly zero is
  // the negative slope (zero for a plain rectifier).
  Gradient backward(const Tape& tape, const Matrix& grad_out) const {
    if (tape.version != version_) throw std::logic_error("Mlp::backward: stale tape");
    if (static_cast<int>(tape.activations.size()) != num_layers() + 1)
      throw std::logic_error("Mlp::backward: tape does not match network");
    if (grad_out.rows() != output_dim() || grad_out.cols() != tape.batch())
      throw std::invalid_argument("Mlp::backward: gradient shape mismatch");
    Gradient g;
    g.layers.resize(layers_.size());
    Matrix delta = grad_out;
    if (output_ == OutputActivation::logistic) {
      const Matrix& y = tape.activations.back();
      delta = (delta.array() * y.array() * (Scalar(1) - y.array())).matrix();
    }
    for (int l = num_layers() - 1; l >= 0; --l) {
      const Matrix& a = tape.activations[l];
      g.layers[l].weight.noalias() = delta * a.transpose();
      g.layers[l].bias = delta.rowwise().sum();
      Matrix back = layers_[l].weight.transpose() * delta;
      if (l > 0) {
        const Scalar slope = negative_slope_;
        back = back.binaryExpr(a, [slope](Scalar d, Scalar act) { return act > Scalar(0) ? d : d * slope; });
        delta = std::move(back);
      } else {
        g.input = std::move(back);
      }
    }
    return g;
  }

 private:
  void run(const Matrix& x, Tape& tape, bool keep) const {
    if (layers_.empty()) throw std::logic_error("Mlp::forward: empty network");
    if (x.rows() != input_dim()) throw std::invalid_argument("Mlp::forward: input width mismatch");
    tape.version = version_;
    tape.activations.clear();
    tape.activations.reserve(layers_.size() + 1);
    tape.activations.push_back(x);
    const Scalar slope = negative_slope_;
    for (int l = 0; l < num_layers(); ++l) {
      Matrix z = layers_[l].weight * tape.activations.back();
      z.colwise() += layers_[l].bias;
      if (l + 1 < num_layers()) {
        z = z.unaryExpr([slope](Scalar v) { return v > Scalar(0) ? v : v * slope; });
      } else if (output_ == OutputActivation::logistic) {
        z = z.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
      }
      if (!keep && l > 0) tape.activations.back() = Matrix();
      tape.activations.push_back(std::move(z));
    }
  }

  std::vector<Layer> layers_;
  OutputActivation output_ = OutputActivation::none;
  Scalar negative_slope_ = 0;
  std::uint64_t version_ = 0;
};

}  // namespace cbav
