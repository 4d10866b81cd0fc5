#include "cbav/field.hpp"

#include "cbav/parallel.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cbav {

namespace {

constexpr int kChunk = 4096;

void encode_into(const Vec3& uvd, const Vec3& dir, double* out) {
  out[0] = uvd[0];
  out[1] = uvd[1];
  out[2] = uvd[2];
  int k = 3;
  for (int c = 0; c < 3; ++c) {
    double freq = std::numbers::pi;
    for (int l = 0; l < kFrequencyBands; ++l) {
      out[k++] = std::sin(freq * uvd[c]);
      out[k++] = std::cos(freq * uvd[c]);
      freq *= 2.0;
    }
  }
  out[k++] = dir[0];
  out[k++] = dir[1];
  out[k++] = dir[2];
}

Eigen::MatrixXd single_input(const Eigen::VectorXd& f, const EncodedInput& enc) {
  Eigen::MatrixXd x(f.size() + kEncodedWidth, 1);
  x.col(0).head(f.size()) = f;
  x.col(0).tail(kEncodedWidth) = enc;
  return x;
}

}  // namespace

EncodedInput encode(const Vec3& uvd, const Vec3& dir) {
  EncodedInput out;
  encode_into(uvd, dir, out.data());
  return out;
}

Decoder make_decoder(int feature_dim, int outputs, OutputActivation activation, std::uint64_t seed, int hidden,
                     int layers) {
  if (feature_dim < 1 || hidden < 1 || layers < 1) throw std::invalid_argument("make_decoder: sizes must be positive");
  std::vector<int> widths{feature_dim + kEncodedWidth};
  for (int i = 0; i + 1 < layers; ++i) widths.push_back(hidden);
  widths.push_back(outputs);
  return Decoder::random(widths, activation, seed);
}

Decoders make_decoders(int feature_dim, std::uint64_t seed, int hidden) {
  return {make_decoder(feature_dim, 1, OutputActivation::none, seed, hidden),
          make_decoder(feature_dim, 3, OutputActivation::logistic, seed ^ 0x9e3779b97f4a7c15ULL, hidden)};
}

SdfEval eval_sdf(const Decoder& phi, const Eigen::VectorXd& f_s, const EncodedInput& enc) {
  if (phi.output_dim() != 1) throw std::invalid_argument("eval_sdf: decoder must have one output");
  SdfEval out;
  out.s = phi.forward(single_input(f_s, enc), out.tape)(0, 0);
  return out;
}

ColorEval eval_color(const Decoder& psi, const Eigen::VectorXd& f_c, const EncodedInput& enc) {
  if (psi.output_dim() != 3) throw std::invalid_argument("eval_color: decoder must have three outputs");
  ColorEval out;
  out.c = psi.forward(single_input(f_c, enc), out.tape).col(0);
  return out;
}

DecoderGradient backward(const Decoder& net, const Decoder::Tape& tape, const Eigen::VectorXd& grad_out) {
  DecoderGradient g;
  g.weights = net.backward(tape, Eigen::MatrixXd(grad_out));
  const int f = net.input_dim() - kEncodedWidth;
  g.feature = g.weights.input.col(0).head(f);
  g.encoded = g.weights.input.col(0).tail(kEncodedWidth);
  return g;
}

FieldSample query_field(const AccelStructure& accel, const Codebook& cb, const Decoders& decoders, const Vec3& x) {
  if (!x.allFinite()) throw std::invalid_argument("query_field: non-finite query point");
  FieldSample out;
  const ClosestPoint cp = closest_point(accel, x);
  out.query = local_coords(accel, cp, x);
  out.query.dir = face_frame(accel, cp.face) * out.query.dir;
  for (int k = 0; k < 3; ++k) out.support[k] = accel.faces()(cp.face, k);
  out.weights = Vec3(cp.bary[0], cp.bary[1], 1.0 - cp.bary[0] - cp.bary[1]);
  out.encoded = encode(out.query.uvd, out.query.dir);
  const auto [f_s, f_c] = lookup_fused(cb, accel.faces(), out.query);
  SdfEval s = eval_sdf(decoders.sdf, f_s, out.encoded);
  ColorEval c = eval_color(decoders.color, f_c, out.encoded);
  out.s = s.s;
  out.c = c.c;
  out.sdf_tape = std::move(s.tape);
  out.color_tape = std::move(c.tape);
  return out;
}

FieldGradient field_backward(const FieldSample& sample, const Decoders& decoders, int num_vertices, double grad_s,
                             const Vec3& grad_c) {
  FieldGradient g;
  const int f = decoders.feature_dim();
  g.codebook = Eigen::MatrixXd::Zero(num_vertices, 2 * f);
  const DecoderGradient gs = backward(decoders.sdf, sample.sdf_tape, Eigen::VectorXd::Constant(1, grad_s));
  const DecoderGradient gc = backward(decoders.color, sample.color_tape, grad_c);
  for (int k = 0; k < 3; ++k) {
    g.codebook.row(sample.support[k]).head(f) += sample.weights[k] * gs.feature.transpose();
    g.codebook.row(sample.support[k]).tail(f) += sample.weights[k] * gc.feature.transpose();
  }
  g.sdf = gs.weights;
  g.color = gc.weights;
  return g;
}

QueryBatch prepare_queries(const AccelStructure& accel, const Points& x) {
  const int n = static_cast<int>(x.rows());
  QueryBatch batch;
  batch.local.resize(n);
  batch.support.resize(n, 3);
  batch.weights.resize(n, 3);
  batch.encoded.resize(kEncodedWidth, n);
  if (!x.allFinite()) throw std::invalid_argument("prepare_queries: non-finite query point");
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Vec3 p = x.row(i).transpose();
      const ClosestPoint cp = closest_point(accel, p);
      LocalQuery q = local_coords(accel, cp, p);
      q.dir = face_frame(accel, cp.face) * q.dir;
      for (int k = 0; k < 3; ++k) batch.support(i, k) = accel.faces()(cp.face, k);
      batch.weights.row(i) = Eigen::RowVector3d(cp.bary[0], cp.bary[1], 1.0 - cp.bary[0] - cp.bary[1]);
      encode_into(q.uvd, q.dir, batch.encoded.col(i).data());
      batch.local[i] = q;
    }
  });
  return batch;
}

Eigen::MatrixXd decoder_inputs(const QueryBatch& batch, const Codebook& cb, FeatureKind kind) {
  const int f = cb.feature_dim;
  const int n = batch.size();
  const int offset = kind == FeatureKind::geometry ? 0 : f;
  Eigen::MatrixXd in(f + kEncodedWidth, n);
  for (int i = 0; i < n; ++i) {
    in.col(i).head(f) = (batch.weights(i, 0) * cb.features.row(batch.support(i, 0)).segment(offset, f) +
                         batch.weights(i, 1) * cb.features.row(batch.support(i, 1)).segment(offset, f) +
                         batch.weights(i, 2) * cb.features.row(batch.support(i, 2)).segment(offset, f))
                            .transpose();
  }
  in.bottomRows(kEncodedWidth) = batch.encoded;
  return in;
}

void scatter_feature_grad(const QueryBatch& batch, const Eigen::MatrixXd& input_grad, FeatureKind kind,
                          int feature_dim, Eigen::MatrixXd& grad) {
  const int f = feature_dim;
  const int offset = kind == FeatureKind::geometry ? 0 : f;
  for (int i = 0; i < batch.size(); ++i)
    for (int k = 0; k < 3; ++k)
      grad.row(batch.support(i, k)).segment(offset, f) += batch.weights(i, k) * input_grad.col(i).head(f).transpose();
}

Vec3 spatial_gradient(const ScalarField& field, const Vec3& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("spatial_gradient: eps must be positive");
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 p = x;
    Vec3 m = x;
    p[k] += eps;
    m[k] -= eps;
    g[k] = (field(p) - field(m)) / (2.0 * eps);
  }
  return g;
}

Points fd_offsets(const Points& x, double eps) {
  const Eigen::Index n = x.rows();
  Points out(6 * n, 3);
  for (int k = 0; k < 3; ++k) {
    out.middleRows(2 * k * n, n) = x;
    out.middleRows(2 * k * n, n).col(k).array() += eps;
    out.middleRows((2 * k + 1) * n, n) = x;
    out.middleRows((2 * k + 1) * n, n).col(k).array() -= eps;
  }
  return out;
}

Points fd_gradients(const Eigen::VectorXd& values, int n, double eps) {
  Points g(n, 3);
  for (int k = 0; k < 3; ++k)
    g.col(k) = (values.segment(2 * k * n, n) - values.segment((2 * k + 1) * n, n)) / (2.0 * eps);
  return g;
}

double NeuralField::sdf(const Vec3& x) const { return query_field(*accel, *codebook, *decoders, x).s; }

Eigen::VectorXd NeuralField::sdf(const Points& x) const {
  const int n = static_cast<int>(x.rows());
  Eigen::VectorXd out(n);
  for (int begin = 0; begin < n; begin += kChunk) {
    const int count = std::min(kChunk, n - begin);
    const QueryBatch batch = prepare_queries(*accel, x.middleRows(begin, count));
    out.segment(begin, count) = decoders->sdf.forward(decoder_inputs(batch, *codebook, FeatureKind::geometry)).row(0);
  }
  return out;
}

Points NeuralField::color(const Points& x) const {
  const int n = static_cast<int>(x.rows());
  Points out(n, 3);
  for (int begin = 0; begin < n; begin += kChunk) {
    const int count = std::min(kChunk, n - begin);
    const QueryBatch batch = prepare_queries(*accel, x.middleRows(begin, count));
    out.middleRows(begin, count) =
        decoders->color.forward(decoder_inputs(batch, *codebook, FeatureKind::texture)).transpose();
  }
  return out;
}

ScalarField NeuralField::sdf_closure() const {
  const NeuralField self = *this;
  return [self](const Vec3& x) { return self.sdf(x); };
}

BatchField NeuralField::sdf_batch_closure() const {
  const NeuralField self = *this;
  return [self](const Points& x) { return self.sdf(x); };
}

}  // namespace cbav
