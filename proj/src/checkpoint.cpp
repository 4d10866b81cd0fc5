#include "cbav/checkpoint.hpp"

#include "cbav/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cbav {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { raw(&v, sizeof(v)); }
  void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
  void i64(std::int64_t v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }
  void text(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  // Row-major payload with its shape.
  template <typename Derived>
  void matrix(const Eigen::DenseBase<Derived>& m) {
    i64(m.rows());
    i64(m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(static_cast<double>(m(i, j)));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  void raw(void* p, std::size_t n) {
    if (n > bytes_.size() - pos_) throw DataError("file truncated");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  double f64() { return get<double>(); }
  std::string text() {
    const std::uint64_t n = u64();
    if (n > bytes_.size() - pos_) throw DataError("file truncated");
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  Eigen::MatrixXd matrix() {
    const std::int64_t r = i64();
    const std::int64_t c = i64();
    if (r < 0 || c < 0 || (c > 0 && static_cast<std::uint64_t>(r) > (bytes_.size() - pos_) / 8 / c))
      throw DataError("corrupt matrix header");
    Eigen::MatrixXd m(r, c);
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) m(i, j) = f64();
    return m;
  }
  void expect_end() const {
    if (pos_ != bytes_.size()) throw DataError("trailing bytes after payload");
  }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof(v));
    return v;
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void write_magic(Writer& w, const char* magic, std::uint32_t version) {
  w.raw(magic, 4);
  w.u32(version);
}

void read_magic(Reader& r, const char* magic, std::uint32_t version, const char* what) {
  char m[4];
  r.raw(m, 4);
  if (std::memcmp(m, magic, 4) != 0) throw DataError(std::string("not a ") + what + " file (bad magic)");
  const std::uint32_t v = r.u32();
  if (v != version)
    throw DataError(std::string(what) + " format version " + std::to_string(v) + " is not supported (expected " +
                    std::to_string(version) + ")");
}

void write_mlp(Writer& w, const Mlp<double>& net) {
  w.u64(static_cast<std::uint64_t>(net.num_layers()));
  if (net.num_layers() == 0) return;
  w.i64(net.input_dim());
  for (const auto& l : net.layers()) w.i64(l.weight.rows());
  w.u32(static_cast<std::uint32_t>(net.output_activation()));
  w.f64(net.negative_slope());
  const Eigen::VectorXd p = net.pack();
  w.matrix(p.transpose());
}

Mlp<double> read_mlp(Reader& r) {
  const std::uint64_t layers = r.u64();
  if (layers == 0) return {};
  if (layers > 64) throw DataError("corrupt network header");
  std::vector<int> widths{static_cast<int>(r.i64())};
  for (std::uint64_t i = 0; i < layers; ++i) widths.push_back(static_cast<int>(r.i64()));
  const std::uint32_t act = r.u32();
  if (act > 1) throw DataError("unknown output activation");
  const double slope = r.f64();
  Mlp<double> net(widths, static_cast<OutputActivation>(act), slope);
  const Eigen::MatrixXd p = r.matrix();
  if (p.rows() != 1 || p.cols() != net.num_params()) throw DataError("network parameter count mismatch");
  net.unpack(p.row(0).transpose());
  return net;
}

void write_adam(Writer& w, const AdamState& s) {
  w.i64(s.step);
  w.matrix(s.m.transpose());
  w.matrix(s.v.transpose());
}

AdamState read_adam(Reader& r) {
  AdamState s;
  s.step = r.i64();
  const Eigen::MatrixXd m = r.matrix();
  const Eigen::MatrixXd v = r.matrix();
  if (m.rows() > 1 || v.rows() > 1) throw DataError("corrupt optimizer state");
  s.m = m.rows() ? Eigen::VectorXd(m.row(0).transpose()) : Eigen::VectorXd();
  s.v = v.rows() ? Eigen::VectorXd(v.row(0).transpose()) : Eigen::VectorXd();
  return s;
}

Dictionary read_dictionary(Reader& r, FeatureKind kind, int n, int m, int f) {
  Dictionary d;
  d.kind = kind;
  d.num_vertices = m;
  d.feature_dim = f;
  const Eigen::MatrixXd e = r.matrix();
  if (e.rows() != n || e.cols() != static_cast<Eigen::Index>(m) * f) throw DataError("dictionary shape mismatch");
  d.entries = e;
  return d;
}

}  // namespace

std::string serialize_model(const Model& model) {
  Writer w;
  write_magic(w, "CBAV", kCheckpointVersion);
  w.u64(model.template_hash);
  w.i64(model.feature_dim());
  w.i64(model.num_vertices());
  w.i64(model.num_subjects());
  w.i64(model.pca_dim_geometry);
  w.i64(model.pca_dim_texture);
  w.matrix(model.shape.entries);
  w.matrix(model.color.entries);
  write_mlp(w, model.decoders.sdf);
  write_mlp(w, model.decoders.color);
  w.u32(model.has_discriminators ? 1 : 0);
  if (model.has_discriminators) {
    write_mlp(w, model.disc_color);
    write_mlp(w, model.disc_normal);
  }
  for (const AdamState* s : {&model.adam_shape, &model.adam_color, &model.adam_sdf, &model.adam_rgb,
                             &model.adam_disc_color, &model.adam_disc_normal})
    write_adam(w, *s);
  w.text(model.rng_state);
  w.i64(model.iteration);
  return w.take();
}

Model deserialize_model(const std::string& bytes) {
  Reader r(bytes);
  read_magic(r, "CBAV", kCheckpointVersion, "checkpoint");
  Model model;
  model.template_hash = r.u64();
  const std::int64_t f = r.i64();
  const std::int64_t m = r.i64();
  const std::int64_t n = r.i64();
  if (f < 1 || m < 1 || n < 1 || f > (1 << 20) || m > (1 << 30) || n > (1 << 30))
    throw DataError("corrupt checkpoint sizes");
  model.pca_dim_geometry = static_cast<int>(r.i64());
  model.pca_dim_texture = static_cast<int>(r.i64());
  model.shape = read_dictionary(r, FeatureKind::geometry, static_cast<int>(n), static_cast<int>(m),
                                static_cast<int>(f));
  model.color = read_dictionary(r, FeatureKind::texture, static_cast<int>(n), static_cast<int>(m),
                                static_cast<int>(f));
  model.decoders.sdf = read_mlp(r);
  model.decoders.color = read_mlp(r);
  if (model.decoders.sdf.input_dim() != f + kEncodedWidth || model.decoders.color.input_dim() != f + kEncodedWidth)
    throw DataError("decoder input width does not match the feature size");
  model.has_discriminators = r.u32() != 0;
  if (model.has_discriminators) {
    model.disc_color = read_mlp(r);
    model.disc_normal = read_mlp(r);
  }
  for (AdamState* s : {&model.adam_shape, &model.adam_color, &model.adam_sdf, &model.adam_rgb,
                       &model.adam_disc_color, &model.adam_disc_normal})
    *s = read_adam(r);
  model.rng_state = r.text();
  model.iteration = r.i64();
  r.expect_end();
  return model;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file(path, serialize_model(model));
}

Model load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_model(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Model load_checkpoint(const std::filesystem::path& path, const TemplateMesh& tmpl) {
  Model model = load_checkpoint(path);
  if (model.template_hash != template_hash(tmpl) || model.num_vertices() != tmpl.num_vertices())
    throw DataError(path.string() + ": checkpoint was trained on a different template");
  return model;
}

std::string serialize_avatar(const Avatar& avatar) {
  Writer w;
  write_magic(w, "CBAA", kAvatarVersion);
  w.u64(avatar.template_hash);
  w.u64(avatar.checkpoint_hash);
  w.u32(static_cast<std::uint32_t>(avatar.provenance));
  w.i64(avatar.source);
  w.i64(avatar.codebook.feature_dim);
  w.matrix(avatar.codebook.features);
  w.matrix(avatar.pose.joint_rotations);
  w.matrix(avatar.pose.shape_coeffs.transpose());
  w.matrix(avatar.pose.root_translation.transpose());
  return w.take();
}

Avatar deserialize_avatar(const std::string& bytes) {
  Reader r(bytes);
  read_magic(r, "CBAA", kAvatarVersion, "avatar");
  Avatar a;
  a.template_hash = r.u64();
  a.checkpoint_hash = r.u64();
  const std::uint32_t prov = r.u32();
  if (prov > 2) throw DataError("unknown avatar provenance");
  a.provenance = static_cast<Provenance>(prov);
  a.source = r.i64();
  const std::int64_t f = r.i64();
  a.codebook.features = r.matrix();
  if (f < 1 || a.codebook.features.cols() != 2 * f) throw DataError("avatar codebook shape mismatch");
  a.codebook.feature_dim = static_cast<int>(f);
  const Eigen::MatrixXd rot = r.matrix();
  if (rot.rows() > 0 && rot.cols() != 3) throw DataError("avatar pose shape mismatch");
  a.pose.joint_rotations = rot;
  const Eigen::MatrixXd shape = r.matrix();
  a.pose.shape_coeffs = shape.rows() ? Eigen::VectorXd(shape.row(0).transpose()) : Eigen::VectorXd();
  const Eigen::MatrixXd t = r.matrix();
  if (t.rows() != 1 || t.cols() != 3) throw DataError("avatar translation shape mismatch");
  a.pose.root_translation = t.row(0).transpose();
  r.expect_end();
  return a;
}

void save_avatar(const Avatar& avatar, const std::filesystem::path& path) {
  write_file(path, serialize_avatar(avatar));
}

Avatar load_avatar(const std::filesystem::path& path) {
  try {
    return deserialize_avatar(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::uint64_t codebook_checksum(const Codebook& cb) {
  const std::int64_t f = cb.feature_dim;
  std::uint64_t h = fnv1a(&f, sizeof(f));
  return fnv1a(cb.features.data(), sizeof(double) * static_cast<std::size_t>(cb.features.size()), h);
}

}  // namespace cbav
