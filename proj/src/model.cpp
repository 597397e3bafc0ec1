#include "nestcal/model.hpp"

#include <cstring>
#include <fstream>

#include "nestcal/error.hpp"

namespace nestcal {

using nn::ConvBlock;
using nn::Linear;
using nn::Mode;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::nested: return "nested";
    case Variant::end_to_end: return "end_to_end";
    case Variant::mtl: return "mtl";
    case Variant::nested_no_skip: return "nested_no_skip";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "nested") return Variant::nested;
  if (s == "end_to_end") return Variant::end_to_end;
  if (s == "mtl") return Variant::mtl;
  if (s == "nested_no_skip") return Variant::nested_no_skip;
  throw ValidationError("unknown variant '" + s + "'");
}

// ---------------------------------------------------------------------------
// Spec

std::vector<int> NestedModelSpec::bottleneck_widths() const {
  std::vector<int> s;
  switch (variant) {
    case Variant::mtl:
      s.assign(levels(), encoder_widths.back());
      break;
    case Variant::end_to_end:
      s.push_back(decoder_widths.empty() ? encoder_widths.back() : decoder_widths.back());
      break;
    default:
      s.push_back(encoder_widths.back());
      for (int w : decoder_widths) s.push_back(w);
  }
  return s;
}

void NestedModelSpec::validate() const {
  auto fail = [](const std::string& m) { throw ShapeError("model spec: " + m); };
  if (channels <= 0 || height <= 0 || width <= 0) fail("input shape must be positive");
  if (arities.empty()) fail("at least one level is required");
  for (int a : arities)
    if (a < 1) fail("arities must be >= 1");
  if (encoder_widths.empty()) fail("encoder needs at least one stage");
  for (int w : encoder_widths)
    if (w <= 0) fail("encoder widths must be positive");
  for (int w : decoder_widths)
    if (w <= 0) fail("decoder widths must be positive");
  if (convs_per_stage < 1) fail("convs_per_stage must be >= 1");
  if (head_hidden < 0) fail("head_hidden must be >= 0");
  if (kernel < 1 || kernel % 2 == 0) fail("kernel must be odd");
  const int k = static_cast<int>(encoder_widths.size());
  const int d = static_cast<int>(decoder_widths.size());
  switch (variant) {
    case Variant::nested:
    case Variant::nested_no_skip:
      if (d != levels() - 1) fail("nested variants need one decoder stage per level after the first");
      break;
    case Variant::end_to_end:
      if (levels() != 1) fail("end_to_end has exactly one head");
      break;
    case Variant::mtl:
      if (d != 0) fail("mtl has no decoder");
      if (mtl_hidden <= 0) fail("mtl_hidden must be positive");
      break;
  }
  if (variant != Variant::mtl) {
    if (d > k - 1) fail("more decoder stages than encoder resolutions");
    const int div = 1 << (k - 1);
    if (height % div != 0 || width % div != 0) {
      fail("input " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by " +
           std::to_string(div));
    }
  } else if ((height >> (k - 1)) < 1 || (width >> (k - 1)) < 1) {
    fail("input too small for the encoder depth");
  }
}

nlohmann::json NestedModelSpec::to_json() const {
  return {{"variant", to_string(variant)},
          {"input_shape", {height, width, channels}},
          {"arities", arities},
          {"encoder_widths", encoder_widths},
          {"decoder_widths", decoder_widths},
          {"convs_per_stage", convs_per_stage},
          {"kernel", kernel},
          {"head_hidden", head_hidden},
          {"mtl_hidden", mtl_hidden},
          {"init_seed", init_seed}};
}

NestedModelSpec NestedModelSpec::from_json(const nlohmann::json& j) {
  NestedModelSpec s;
  try {
    s.variant = variant_from_string(j.value("variant", std::string("nested")));
    if (j.contains("input_shape")) {
      const auto shape = j.at("input_shape").get<std::vector<int>>();
      if (shape.size() != 3) throw ShapeError("model spec: input_shape is (H, W, C)");
      s.height = shape[0];
      s.width = shape[1];
      s.channels = shape[2];
    }
    if (j.contains("arities")) s.arities = j.at("arities").get<std::vector<int>>();
    if (j.contains("encoder_widths")) s.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
    if (j.contains("decoder_widths")) s.decoder_widths = j.at("decoder_widths").get<std::vector<int>>();
    s.convs_per_stage = j.value("convs_per_stage", s.convs_per_stage);
    s.kernel = j.value("kernel", s.kernel);
    s.head_hidden = j.value("head_hidden", s.head_hidden);
    s.mtl_hidden = j.value("mtl_hidden", s.mtl_hidden);
    s.init_seed = j.value("init_seed", s.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model spec json: ") + e.what());
  }
  s.validate();
  return s;
}

NestedModelSpec NestedModelSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model spec " + path.string());
  return from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------
// Graph

namespace {

struct Stage {
  std::vector<ConvBlock> blocks;
  Tensor output;
  int up_channels = 0;  // decoder: channels coming from the previous stage

  Tensor forward(Tensor x, Mode mode) {
    for (auto& b : blocks) x = b.forward(x, mode);
    output = x;
    return x;
  }
  Tensor backward(Tensor g, bool need_input_grad) {
    for (int i = static_cast<int>(blocks.size()) - 1; i >= 0; --i) g = blocks[i].backward(g, i > 0 || need_input_grad);
    return g;
  }
};

struct Head {
  std::vector<Linear> layers;
  std::vector<Matrix> hidden;

  Matrix forward(const Matrix& b) {
    Matrix h = b;
    hidden.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(h);
      if (i + 1 < layers.size()) {
        h = nn::relu(h);
        hidden[i] = h;
      }
    }
    return h;
  }
  Matrix backward(Matrix g) {
    for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
      if (i + 1 < static_cast<int>(layers.size())) g = nn::relu_backward(g, hidden[i]);
      g = layers[i].backward(g);
    }
    return g;
  }
};

struct LevelCache {
  Matrix bottleneck;
  std::vector<Scalar> norms;
  int height = 0, width = 0;
};

void accumulate(Tensor& acc, const Tensor& g) {
  if (acc.data.empty()) {
    acc = g;
    return;
  }
  if (!acc.same_shape(g)) throw ShapeError("gradient shape mismatch");
  for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
}

Tensor slice_channels(const Tensor& t, int first, int count) {
  Tensor out(count, t.batch, t.height, t.width);
  std::memcpy(out.data.data(), t.data.data() + first * t.row_size(), out.data.size() * sizeof(Scalar));
  return out;
}

}  // namespace

struct Model::Impl {
  std::vector<Stage> enc, dec;
  std::vector<nn::MaxPoolCache> pools;
  std::vector<Head> heads;
  std::vector<int> head_stage;  // nested: 0 = encoder end, d = decoder stage d; e2e: D
  // Forward bookkeeping.
  std::vector<LevelCache> cache;
  LevelCache shared;  // mtl
  int computed_levels = 0;
  int computed_dec = 0;
  int in_channels = 0;
};

Model::Model(NestedModelSpec spec) : spec_(std::move(spec)), impl_(std::make_unique<Impl>()) {
  spec_.validate();
  std::mt19937_64 rng(spec_.init_seed);
  auto& g = *impl_;
  g.in_channels = spec_.channels;
  const bool e2e = spec_.variant == Variant::end_to_end;
  const bool mtl = spec_.variant == Variant::mtl;
  const int k = static_cast<int>(spec_.encoder_widths.size());

  int in = spec_.channels;
  for (int s = 0; s < k; ++s) {
    Stage st;
    for (int c = 0; c < spec_.convs_per_stage; ++c) {
      st.blocks.emplace_back("enc" + std::to_string(s) + "." + std::to_string(c), in, spec_.encoder_widths[s],
                             spec_.kernel, 0, rng);
      in = spec_.encoder_widths[s];
    }
    g.enc.push_back(std::move(st));
  }
  g.pools.resize(mtl ? k : k - 1);

  const auto widths = spec_.bottleneck_widths();
  if (mtl) {
    for (int l = 0; l < spec_.levels(); ++l) {
      Head h;
      const std::string n = "head" + std::to_string(l);
      h.layers.emplace_back(n + ".fc0", widths[l], spec_.mtl_hidden, l, true, rng);
      h.layers.emplace_back(n + ".fc1", spec_.mtl_hidden, spec_.arities[l] + 1, l, true, rng);
      g.heads.push_back(std::move(h));
      g.head_stage.push_back(0);
    }
    return;
  }

  int prev = spec_.encoder_widths.back();
  for (std::size_t d = 0; d < spec_.decoder_widths.size(); ++d) {
    Stage st;
    st.up_channels = prev;
    const int skip = spec_.use_skip() ? spec_.encoder_widths[k - 2 - d] : 0;
    int cin = prev + skip;
    const int level = e2e ? 0 : static_cast<int>(d) + 1;
    for (int c = 0; c < spec_.convs_per_stage; ++c) {
      st.blocks.emplace_back("dec" + std::to_string(d + 1) + "." + std::to_string(c), cin, spec_.decoder_widths[d],
                             spec_.kernel, level, rng);
      cin = spec_.decoder_widths[d];
    }
    prev = spec_.decoder_widths[d];
    g.dec.push_back(std::move(st));
  }
  for (int l = 0; l < spec_.levels(); ++l) {
    Head h;
    const std::string n = "head" + std::to_string(l);
    if (spec_.head_hidden > 0) {
      h.layers.emplace_back(n + ".fc0", widths[l], spec_.head_hidden, l, true, rng);
      h.layers.emplace_back(n + ".fc1", spec_.head_hidden, spec_.arities[l] + 1, l, true, rng);
    } else {
      h.layers.emplace_back(n, widths[l], spec_.arities[l] + 1, l, true, rng);
    }
    g.heads.push_back(std::move(h));
    g.head_stage.push_back(e2e ? static_cast<int>(g.dec.size()) : l);
  }
}

Model::Model(const Model& other)
    : spec_(other.spec_), impl_(std::make_unique<Impl>(*other.impl_)), trained_(other.trained_) {}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    spec_ = other.spec_;
    impl_ = std::make_unique<Impl>(*other.impl_);
    trained_ = other.trained_;
  }
  return *this;
}

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

Model build_model(const NestedModelSpec& spec) { return Model(spec); }

ForwardResult Model::forward(const Tensor& x, Mode mode, int max_level, bool keep_taps) {
  auto& g = *impl_;
  if (x.channels != spec_.channels || x.height != spec_.height || x.width != spec_.width) {
    throw ShapeError("forward: expected input " + std::to_string(spec_.channels) + "x" + std::to_string(spec_.height) +
                     "x" + std::to_string(spec_.width));
  }
  if (max_level < 0 || max_level >= levels()) max_level = levels() - 1;
  const bool mtl = spec_.variant == Variant::mtl;
  const int k = static_cast<int>(g.enc.size());
  ForwardResult r;

  Tensor cur = x;
  for (int s = 0; s < k; ++s) {
    cur = g.enc[s].forward(std::move(cur), mode);
    if (s < static_cast<int>(g.pools.size())) {
      cur = nn::max_pool2(cur, g.pools[s]);
      if (keep_taps && s == std::min(1, static_cast<int>(g.pools.size()) - 1)) r.taps["F"] = cur;
    }
  }
  if (keep_taps) r.taps["H"] = g.enc.back().output;

  g.cache.assign(max_level + 1, {});
  r.scores.resize(max_level + 1);
  r.bottlenecks.resize(max_level + 1);
  g.computed_levels = max_level + 1;

  auto bottleneck_of = [](const Tensor& t, LevelCache& c) {
    c.height = t.height;
    c.width = t.width;
    c.bottleneck = nn::l2_normalize(nn::global_avg_pool(t), c.norms);
  };

  if (mtl) {
    bottleneck_of(cur, g.shared);
    g.computed_dec = 0;
    for (int l = 0; l <= max_level; ++l) {
      r.bottlenecks[l] = g.shared.bottleneck;
      r.scores[l] = g.heads[l].forward(g.shared.bottleneck);
    }
    return r;
  }

  int need_dec = 0;
  for (int l = 0; l <= max_level; ++l) need_dec = std::max(need_dec, g.head_stage[l]);
  g.computed_dec = need_dec;
  for (int d = 1; d <= need_dec; ++d) {
    Tensor up = nn::upsample2(d == 1 ? g.enc.back().output : g.dec[d - 2].output);
    if (spec_.use_skip()) up = concat_channels(up, g.enc[k - 1 - d].output);
    g.dec[d - 1].forward(std::move(up), mode);
    if (keep_taps && d == 1) r.taps["G"] = g.dec[0].output;
  }
  for (int l = 0; l <= max_level; ++l) {
    const int st = g.head_stage[l];
    bottleneck_of(st == 0 ? g.enc.back().output : g.dec[st - 1].output, g.cache[l]);
    r.bottlenecks[l] = g.cache[l].bottleneck;
    r.scores[l] = g.heads[l].forward(g.cache[l].bottleneck);
  }
  return r;
}

Tensor Model::backward(const std::vector<Matrix>& score_grads, bool need_input_grad) {
  auto& g = *impl_;
  if (static_cast<int>(score_grads.size()) > g.computed_levels) {
    throw ShapeError("backward: gradients for levels that were not computed");
  }
  const bool mtl = spec_.variant == Variant::mtl;
  const int k = static_cast<int>(g.enc.size());
  std::vector<Tensor> enc_grad(k), dec_grad(g.dec.size());

  if (mtl) {
    Matrix db;
    for (std::size_t l = 0; l < score_grads.size(); ++l) {
      if (score_grads[l].size() == 0) continue;
      Matrix d = g.heads[l].backward(score_grads[l]);
      db = db.size() == 0 ? d : Matrix(db + d);
    }
    if (db.size() == 0) return {};
    const Matrix dp = nn::l2_normalize_backward(db, g.shared.bottleneck, g.shared.norms);
    Tensor t = nn::global_avg_pool_backward(dp, g.shared.height, g.shared.width);
    enc_grad[k - 1] = nn::max_pool2_backward(t, g.pools[k - 1]);
  } else {
    for (std::size_t l = 0; l < score_grads.size(); ++l) {
      if (score_grads[l].size() == 0) continue;
      auto& c = g.cache[l];
      const Matrix db = g.heads[l].backward(score_grads[l]);
      const Matrix dp = nn::l2_normalize_backward(db, c.bottleneck, c.norms);
      Tensor t = nn::global_avg_pool_backward(dp, c.height, c.width);
      const int st = g.head_stage[l];
      accumulate(st == 0 ? enc_grad[k - 1] : dec_grad[st - 1], t);
    }
    for (int d = g.computed_dec; d >= 1; --d) {
      if (dec_grad[d - 1].data.empty()) continue;
      Tensor gin = g.dec[d - 1].backward(dec_grad[d - 1], true);
      const int up = g.dec[d - 1].up_channels;
      Tensor gup = nn::upsample2_backward(spec_.use_skip() ? slice_channels(gin, 0, up) : gin);
      accumulate(d == 1 ? enc_grad[k - 1] : dec_grad[d - 2], gup);
      if (spec_.use_skip()) accumulate(enc_grad[k - 1 - d], slice_channels(gin, up, gin.channels - up));
    }
  }

  Tensor dx;
  for (int s = k - 1; s >= 0; --s) {
    if (enc_grad[s].data.empty()) continue;
    Tensor gin = g.enc[s].backward(enc_grad[s], s > 0 || need_input_grad);
    if (s > 0) {
      accumulate(enc_grad[s - 1], nn::max_pool2_backward(gin, g.pools[s - 1]));
    } else {
      dx = std::move(gin);
    }
  }
  if (need_input_grad && dx.data.empty()) {
    dx = Tensor(spec_.channels, g.enc[0].output.batch, spec_.height, spec_.width);
  }
  return dx;
}

Matrix Model::head_forward(int level, const Matrix& bottleneck) {
  if (level < 0 || level >= levels()) throw ShapeError("head_forward: bad level");
  return impl_->heads[level].forward(bottleneck);
}

void Model::head_backward(int level, const Matrix& score_grad) {
  if (level < 0 || level >= levels()) throw ShapeError("head_backward: bad level");
  impl_->heads[level].backward(score_grad);
}

std::vector<nn::Parameter*> Model::parameters() {
  std::vector<nn::Parameter*> p;
  std::vector<nn::Buffer> unused;
  for (auto& s : impl_->enc)
    for (auto& b : s.blocks) b.collect(p, unused);
  for (auto& s : impl_->dec)
    for (auto& b : s.blocks) b.collect(p, unused);
  for (auto& h : impl_->heads) {
    for (auto& l : h.layers) {
      p.push_back(&l.weight());
      p.push_back(&l.bias());
    }
  }
  return p;
}

std::vector<nn::Buffer> Model::buffers() {
  std::vector<nn::Parameter*> unused;
  std::vector<nn::Buffer> b;
  for (auto& s : impl_->enc)
    for (auto& blk : s.blocks) blk.collect(unused, b);
  for (auto& s : impl_->dec)
    for (auto& blk : s.blocks) blk.collect(unused, b);
  return b;
}

std::vector<nn::Parameter*> Model::parameters_up_to(int level) {
  std::vector<nn::Parameter*> out;
  for (auto* p : parameters())
    if (p->level <= level) out.push_back(p);
  return out;
}

std::vector<nn::Parameter*> Model::parameters_at(int level) {
  std::vector<nn::Parameter*> out;
  for (auto* p : parameters())
    if (p->level == level) out.push_back(p);
  return out;
}

std::vector<nn::Parameter*> Model::head_parameters(int level) {
  std::vector<nn::Parameter*> out;
  for (auto* p : parameters())
    if (p->head && p->level == level) out.push_back(p);
  return out;
}

long long Model::count_parameters() {
  long long n = 0;
  for (auto* p : parameters()) n += p->size();
  return n;
}

Model::State Model::state() {
  State s;
  for (auto* p : parameters()) s.values.push_back(p->value);
  for (auto& b : buffers()) s.values.push_back(*b.value);
  return s;
}

void Model::restore(const State& s) {
  std::size_t i = 0;
  auto params = parameters();
  auto bufs = buffers();
  if (s.values.size() != params.size() + bufs.size()) throw ShapeError("restore: state does not match the model");
  for (auto* p : params) p->value = s.values[i++];
  for (auto& b : bufs) *b.value = s.values[i++];
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u64 header length, JSON header, float32 payload.

namespace {
constexpr char kMagic[8] = {'N', 'C', 'A', 'L', 'C', 'K', 'P', '1'};
}

void Model::save(const std::filesystem::path& path) {
  nlohmann::json header;
  header["spec"] = spec_.to_json();
  header["trained"] = trained_;
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (auto* p : parameters()) tensors.emplace_back(p->name, &p->value);
  for (auto& b : buffers()) tensors.emplace_back(b.name, b.value);
  for (auto& [name, m] : tensors) header["tensors"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto& [name, m] : tensors) {
    std::vector<float> buf(m->data(), m->data() + m->size());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path, const NestedModelSpec* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError("not a checkpoint file", 0);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 26)) throw FormatError("bad checkpoint header length", 8);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("truncated checkpoint header", 16);
  const auto header = nlohmann::json::parse(text);
  const auto spec = NestedModelSpec::from_json(header.at("spec"));
  if (expected && !(spec == *expected)) throw ValidationError("checkpoint spec differs from the requested spec");

  Model m(spec);
  m.trained_ = header.value("trained", false);
  std::vector<std::pair<std::string, Matrix*>> tensors;
  for (auto* p : m.parameters()) tensors.emplace_back(p->name, &p->value);
  for (auto& b : m.buffers()) tensors.emplace_back(b.name, b.value);
  const auto& listed = header.at("tensors");
  if (listed.size() != tensors.size()) throw ValidationError("checkpoint tensor list does not match the spec");
  std::size_t offset = 16 + len;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, mat] = tensors[i];
    if (listed[i].at("name") != name || listed[i].at("rows") != mat->rows() || listed[i].at("cols") != mat->cols()) {
      throw ValidationError("checkpoint tensor '" + listed[i].at("name").get<std::string>() + "' does not match");
    }
    std::vector<float> buf(static_cast<std::size_t>(mat->size()));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw FormatError("truncated checkpoint payload", offset);
    offset += buf.size() * sizeof(float);
    for (std::size_t j = 0; j < buf.size(); ++j) mat->data()[j] = static_cast<Scalar>(buf[j]);
  }
  return m;
}

}  // namespace nestcal
