#include "mmn/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "mmn/error.hpp"

namespace mmn {
namespace {

constexpr char kMagic[4] = {'M', 'M', 'N', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f32(double v) { le(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw IoError("model file truncated");
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(le<std::uint32_t>())); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

struct RawTensor {
  std::vector<std::uint32_t> shape;
  std::vector<double> values;
};

void put_tensor(Writer& w, const std::string& name, const std::vector<std::uint32_t>& shape,
                const std::vector<double>& values, StorageType st) {
  w.le(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.le(static_cast<std::uint8_t>(st));
  w.le(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) w.le(d);
  for (double v : values) {
    if (st == StorageType::f32) {
      w.f32(v);
    } else {
      w.f64(v);
    }
  }
}

void put_matrix(Writer& w, const std::string& name, const Matrix& m, StorageType st) {
  put_tensor(w, name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
             m.data(), st);
}

void put_vector(Writer& w, const std::string& name, const Vector& v, StorageType st) {
  put_tensor(w, name, {static_cast<std::uint32_t>(v.size())}, v, st);
}

std::string layer_name(std::size_t l, const char* field) {
  return "layers." + std::to_string(l) + "." + field;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const ModelFile& file) {
  const ModelWeights& mw = file.weights;
  mw.validate();
  const StorageType st = file.storage;
  Writer w;
  w.bytes(kMagic, 4);
  w.le(kModelFileVersion);
  const ModelConfig& c = mw.config;
  for (std::uint32_t v : {c.n_layers, c.d_model, c.d_mlp, c.n_heads, c.vocab_size, c.max_seq,
                          c.patch_grid, c.image_size, c.channels})
    w.le(v);
  w.le(c.seed);

  const std::uint32_t count = 5 + 10 * c.n_layers + (file.encoder ? 1 : 0) + (file.projection ? 1 : 0);
  w.le(count);
  put_matrix(w, "token_embedding", mw.token_embedding, st);
  put_matrix(w, "position_embedding", mw.position_embedding, st);
  for (std::size_t l = 0; l < mw.layers.size(); ++l) {
    const LayerWeights& lw = mw.layers[l];
    put_vector(w, layer_name(l, "ln.gain"), lw.ln.gain, st);
    put_vector(w, layer_name(l, "ln.bias"), lw.ln.bias, st);
    put_matrix(w, layer_name(l, "attn.wq"), lw.wq, st);
    put_matrix(w, layer_name(l, "attn.wk"), lw.wk, st);
    put_matrix(w, layer_name(l, "attn.wv"), lw.wv, st);
    put_matrix(w, layer_name(l, "attn.wo"), lw.wo, st);
    put_matrix(w, layer_name(l, "mlp.w_in"), lw.w_in, st);
    put_vector(w, layer_name(l, "mlp.b_in"), lw.b_in, st);
    put_matrix(w, layer_name(l, "mlp.w_out"), lw.w_out, st);
    put_vector(w, layer_name(l, "mlp.b_out"), lw.b_out, st);
  }
  put_vector(w, "final_ln.gain", mw.final_ln.gain, st);
  put_vector(w, "final_ln.bias", mw.final_ln.bias, st);
  put_matrix(w, "unembedding", mw.unembedding, st);
  if (file.encoder) put_matrix(w, "vision.encoder", file.encoder->weight, st);
  if (file.projection) put_matrix(w, "vision.projection", file.projection->weight, st);
  return w.take();
}

ModelFile deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw IoError("bad magic: not an MMN1 model file");
  const auto version = r.le<std::uint16_t>();
  if (version != kModelFileVersion)
    throw IoError("unsupported model file version " + std::to_string(version));
  ModelConfig c;
  c.n_layers = r.le<std::uint32_t>();
  c.d_model = r.le<std::uint32_t>();
  c.d_mlp = r.le<std::uint32_t>();
  c.n_heads = r.le<std::uint32_t>();
  c.vocab_size = r.le<std::uint32_t>();
  c.max_seq = r.le<std::uint32_t>();
  c.patch_grid = r.le<std::uint32_t>();
  c.image_size = r.le<std::uint32_t>();
  c.channels = r.le<std::uint32_t>();
  c.seed = r.le<std::uint64_t>();
  c.validate();

  std::map<std::string, RawTensor> tensors;
  std::optional<StorageType> storage;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>();
    std::string name = r.str(name_len);
    const auto dtype = r.le<std::uint8_t>();
    if (dtype != 1 && dtype != 2) throw IoError("tensor " + name + ": unknown dtype tag");
    const auto st = static_cast<StorageType>(dtype);
    if (storage && *storage != st) throw IoError("mixed tensor dtypes are not supported");
    storage = st;
    const auto rank = r.le<std::uint8_t>();
    RawTensor t;
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.le<std::uint32_t>());
      n *= t.shape.back();
    }
    r.need(n * (st == StorageType::f32 ? 4 : 8));
    t.values.resize(n);
    for (auto& v : t.values) v = st == StorageType::f32 ? r.f32() : r.f64();
    if (!tensors.emplace(name, std::move(t)).second) throw IoError("duplicate tensor " + name);
  }
  if (!r.done()) throw IoError("trailing bytes after last tensor");

  auto take = [&](const std::string& name) -> RawTensor& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("missing tensor " + name);
    return it->second;
  };
  auto matrix = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    RawTensor& t = take(name);
    if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols)
      throw ShapeError("tensor " + name + " has wrong shape");
    Matrix m(rows, cols);
    m.data() = std::move(t.values);
    return m;
  };
  auto vector = [&](const std::string& name, std::size_t n) {
    RawTensor& t = take(name);
    if (t.shape.size() != 1 || t.shape[0] != n) throw ShapeError("tensor " + name + " has wrong shape");
    return std::move(t.values);
  };

  ModelFile f;
  f.storage = storage.value_or(StorageType::f64);
  ModelWeights& mw = f.weights;
  mw.config = c;
  const std::size_t d = c.d_model;
  mw.token_embedding = matrix("token_embedding", c.vocab_size, d);
  mw.position_embedding = matrix("position_embedding", c.max_seq, d);
  mw.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerWeights& lw = mw.layers[l];
    lw.ln.gain = vector(layer_name(l, "ln.gain"), d);
    lw.ln.bias = vector(layer_name(l, "ln.bias"), d);
    lw.wq = matrix(layer_name(l, "attn.wq"), d, d);
    lw.wk = matrix(layer_name(l, "attn.wk"), d, d);
    lw.wv = matrix(layer_name(l, "attn.wv"), d, d);
    lw.wo = matrix(layer_name(l, "attn.wo"), d, d);
    lw.w_in = matrix(layer_name(l, "mlp.w_in"), c.d_mlp, d);
    lw.b_in = vector(layer_name(l, "mlp.b_in"), c.d_mlp);
    lw.w_out = matrix(layer_name(l, "mlp.w_out"), d, c.d_mlp);
    lw.b_out = vector(layer_name(l, "mlp.b_out"), d);
  }
  mw.final_ln.gain = vector("final_ln.gain", d);
  mw.final_ln.bias = vector("final_ln.bias", d);
  mw.unembedding = matrix("unembedding", c.vocab_size, d);
  if (auto it = tensors.find("vision.encoder"); it != tensors.end()) {
    if (it->second.shape.size() != 2 || it->second.shape[1] != c.patch_dim())
      throw ShapeError("vision.encoder has wrong shape");
    EncoderWeights e;
    e.weight = matrix("vision.encoder", it->second.shape[0], c.patch_dim());
    f.encoder = std::move(e);
  }
  if (auto it = tensors.find("vision.projection"); it != tensors.end()) {
    if (it->second.shape.size() != 2 || it->second.shape[0] != d)
      throw ShapeError("vision.projection has wrong shape");
    ProjectionLayer p;
    p.weight = matrix("vision.projection", d, it->second.shape[1]);
    f.projection = std::move(p);
  }
  if (f.encoder && f.projection && f.encoder->d_enc() != f.projection->weight.cols())
    throw ShapeError("projection width does not match encoder dimension");
  mw.validate();
  return f;
}

void save_model(const std::filesystem::path& path, const ModelFile& file) {
  const auto bytes = serialize_model(file);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModelFile load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace mmn
