#include "cotd/transformer.hpp"

#include <cctype>
#include <cmath>
#include <random>

#include "cotd/errors.hpp"
#include "cotd/util.hpp"

namespace cotd {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

void TransformerArch::validate() const {
  if (vocab_size == 0 || hidden == 0 || heads == 0 || layers == 0 || ffn == 0 ||
      max_positions == 0 || output_dim == 0)
    throw ConfigError("transformer dimensions must be positive");
  if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by heads");
}

nlohmann::json TransformerArch::to_json() const {
  return {{"vocab_size", vocab_size}, {"hidden", hidden},
          {"heads", heads},           {"layers", layers},
          {"ffn", ffn},               {"max_positions", max_positions},
          {"output_dim", output_dim}};
}

TransformerArch TransformerArch::from_json(const nlohmann::json& j) {
  TransformerArch a;
  a.vocab_size = j.at("vocab_size").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::size_t>();
  a.heads = j.at("heads").get<std::size_t>();
  a.layers = j.at("layers").get<std::size_t>();
  a.ffn = j.at("ffn").get<std::size_t>();
  a.max_positions = j.at("max_positions").get<std::size_t>();
  a.output_dim = j.at("output_dim").get<std::size_t>();
  a.validate();
  return a;
}

std::vector<std::size_t> transformer_token_ids(std::string_view text, std::size_t vocab_size,
                                               std::uint64_t seed, std::size_t max_tokens) {
  std::vector<std::size_t> ids;
  std::string piece;
  auto flush = [&] {
    if (!piece.empty() && ids.size() < max_tokens)
      ids.push_back(static_cast<std::size_t>(stable_hash64(piece, seed) % vocab_size));
    piece.clear();
  };
  for (const char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u)) {
      flush();
      piece = c;
      flush();
    } else {
      piece += static_cast<char>(std::tolower(u));
    }
  }
  flush();
  return ids;
}

namespace {

constexpr double kLnEps = 1e-5;

struct LnCache {
  MatrixXd xhat;
  VectorXd inv_std;
};

MatrixXd layer_norm(const MatrixXd& x, const RowVectorXd& gain, const RowVectorXd& bias,
                    LnCache* cache) {
  const auto n = static_cast<double>(x.cols());
  const VectorXd mean = x.rowwise().sum() / n;
  MatrixXd centered = x.colwise() - mean;
  const VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / n) + kLnEps).rsqrt().matrix();
  MatrixXd xhat = inv_std.asDiagonal() * centered;
  MatrixXd y = (xhat.array().rowwise() * gain.array()).matrix();
  y.rowwise() += bias;
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

// Returns dx; accumulates dgain/dbias.
MatrixXd layer_norm_backward(const MatrixXd& dy, const RowVectorXd& gain, const LnCache& c,
                             Eigen::Ref<RowVectorXd> dgain, Eigen::Ref<RowVectorXd> dbias) {
  const auto n = static_cast<double>(dy.cols());
  dgain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const MatrixXd dxhat = (dy.array().rowwise() * gain.array()).matrix();
  const VectorXd mean_dxhat = dxhat.rowwise().sum() / n;
  const VectorXd mean_dxhat_xhat = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() / n;
  MatrixXd dx = dxhat.colwise() - mean_dxhat;
  dx -= (c.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
  return c.inv_std.asDiagonal() * dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LayerCache {
  MatrixXd x, q, k, v, o, x1, hpre, hact;
  std::vector<MatrixXd> attn;
  LnCache ln1, ln2;
};

struct TransformerTape final : EncoderTape {
  std::vector<LayerCache> layers;
  MatrixXd top;       // output of the last layer
  RowVectorXd mean;   // pooled input
  VectorXd out;       // pooler output
};

MatrixXd add_bias(MatrixXd m, const RowVectorXd& b) {
  m.rowwise() += b;
  return m;
}

MatrixXd layer_forward(const TransformerLayer& p, std::size_t heads, const MatrixXd& x,
                       LayerCache* cache) {
  const auto t = x.rows();
  const auto h = x.cols();
  const auto dh = h / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  MatrixXd q = add_bias(x * p.wq, p.bq);
  MatrixXd k = add_bias(x * p.wk, p.bk);
  MatrixXd v = add_bias(x * p.wv, p.bv);
  MatrixXd o(t, h);
  std::vector<MatrixXd> attn;
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const auto c0 = static_cast<Eigen::Index>(hd) * dh;
    MatrixXd s = q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose() * scale;
    const VectorXd row_max = s.rowwise().maxCoeff();
    s = (s.colwise() - row_max).array().exp().matrix();
    const VectorXd row_sum = s.rowwise().sum();
    s = row_sum.cwiseInverse().asDiagonal() * s;
    o.middleCols(c0, dh) = s * v.middleCols(c0, dh);
    if (cache) attn.push_back(std::move(s));
  }
  const MatrixXd r1 = x + add_bias(o * p.wo, p.bo);
  LnCache ln1, ln2;
  MatrixXd x1 = layer_norm(r1, p.ln1_gain, p.ln1_bias, cache ? &ln1 : nullptr);
  const MatrixXd hpre = add_bias(x1 * p.w1, p.b1);
  const MatrixXd hact = hpre.unaryExpr([](double z) { return gelu(z); });
  const MatrixXd r2 = x1 + add_bias(hact * p.w2, p.b2);
  MatrixXd x2 = layer_norm(r2, p.ln2_gain, p.ln2_bias, cache ? &ln2 : nullptr);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->attn = std::move(attn);
    cache->x1 = std::move(x1);
    cache->hpre = hpre;
    cache->hact = hact;
    cache->ln1 = std::move(ln1);
    cache->ln2 = std::move(ln2);
  }
  return x2;
}

// Gradient accumulators for one layer, mapped onto the flat grads vectors.
struct LayerGrads {
  Eigen::Map<MatrixXd> wq, wk, wv, wo;
  Eigen::Map<RowVectorXd> bq, bk, bv, bo, ln1g, ln1b;
  Eigen::Map<MatrixXd> w1;
  Eigen::Map<RowVectorXd> b1;
  Eigen::Map<MatrixXd> w2;
  Eigen::Map<RowVectorXd> b2, ln2g, ln2b;
};

MatrixXd layer_backward(const TransformerLayer& p, std::size_t heads, const LayerCache& c,
                        const MatrixXd& dx2, LayerGrads& g) {
  const auto h = c.x.cols();
  const auto dh = h / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const MatrixXd dr2 = layer_norm_backward(dx2, p.ln2_gain, c.ln2, g.ln2g, g.ln2b);
  g.w2 += c.hact.transpose() * dr2;
  g.b2 += dr2.colwise().sum();
  const MatrixXd dhact = dr2 * p.w2.transpose();
  const MatrixXd dhpre =
      (dhact.array() * c.hpre.unaryExpr([](double z) { return gelu_grad(z); }).array()).matrix();
  g.w1 += c.x1.transpose() * dhpre;
  g.b1 += dhpre.colwise().sum();
  const MatrixXd dx1 = dr2 + dhpre * p.w1.transpose();

  const MatrixXd dr1 = layer_norm_backward(dx1, p.ln1_gain, c.ln1, g.ln1g, g.ln1b);
  g.wo += c.o.transpose() * dr1;
  g.bo += dr1.colwise().sum();
  const MatrixXd d_o = dr1 * p.wo.transpose();

  MatrixXd dq(c.q.rows(), h), dk(c.k.rows(), h), dv(c.v.rows(), h);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const auto c0 = static_cast<Eigen::Index>(hd) * dh;
    const MatrixXd& a = c.attn[hd];
    const MatrixXd doh = d_o.middleCols(c0, dh);
    const MatrixXd da = doh * c.v.middleCols(c0, dh).transpose();
    dv.middleCols(c0, dh) = a.transpose() * doh;
    const VectorXd row_dot = (da.array() * a.array()).rowwise().sum().matrix();
    const MatrixXd ds = (a.array() * (da.colwise() - row_dot).array()).matrix() * scale;
    dq.middleCols(c0, dh) = ds * c.k.middleCols(c0, dh);
    dk.middleCols(c0, dh) = ds.transpose() * c.q.middleCols(c0, dh);
  }
  g.wq += c.x.transpose() * dq;
  g.wk += c.x.transpose() * dk;
  g.wv += c.x.transpose() * dv;
  g.bq += dq.colwise().sum();
  g.bk += dk.colwise().sum();
  g.bv += dv.colwise().sum();
  return dr1 + dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
}

}  // namespace

TransformerEncoder::TransformerEncoder(EncoderConfig config, TransformerArch arch)
    : Encoder(std::move(config)), arch_(arch) {
  arch_.validate();
  config_.embedding_dim = arch_.output_dim;
  if (config_.trainable_depth > arch_.layers)
    throw ConfigError("trainable_depth " + std::to_string(config_.trainable_depth) +
                      " exceeds the encoder's " + std::to_string(arch_.layers) + " layers");
  const auto h = static_cast<Eigen::Index>(arch_.hidden);
  const auto f = static_cast<Eigen::Index>(arch_.ffn);
  token_embedding_ = MatrixXd::Zero(static_cast<Eigen::Index>(arch_.vocab_size), h);
  position_embedding_ = MatrixXd::Zero(static_cast<Eigen::Index>(arch_.max_positions), h);
  emb_ln_gain_ = RowVectorXd::Ones(h);
  emb_ln_bias_ = RowVectorXd::Zero(h);
  layers_.resize(arch_.layers);
  for (auto& l : layers_) {
    l.wq = l.wk = l.wv = l.wo = MatrixXd::Zero(h, h);
    l.bq = l.bk = l.bv = l.bo = RowVectorXd::Zero(h);
    l.ln1_gain = l.ln2_gain = RowVectorXd::Ones(h);
    l.ln1_bias = l.ln2_bias = RowVectorXd::Zero(h);
    l.w1 = MatrixXd::Zero(h, f);
    l.b1 = RowVectorXd::Zero(f);
    l.w2 = MatrixXd::Zero(f, h);
    l.b2 = RowVectorXd::Zero(h);
  }
  pooler_w_ = MatrixXd::Zero(h, static_cast<Eigen::Index>(arch_.output_dim));
  pooler_b_ = RowVectorXd::Zero(static_cast<Eigen::Index>(arch_.output_dim));
}

void TransformerEncoder::randomize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  // Box-Muller on raw engine output so the weights do not depend on the
  // standard library's distribution implementation.
  auto normal = [&rng]() {
    const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return 0.02 * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  };
  auto fill = [&](auto& m) { m = m.unaryExpr([&](double) { return normal(); }); };
  fill(token_embedding_);
  fill(position_embedding_);
  for (auto& l : layers_) {
    fill(l.wq);
    fill(l.wk);
    fill(l.wv);
    fill(l.wo);
    fill(l.w1);
    fill(l.w2);
  }
  fill(pooler_w_);
}

NamedTensors TransformerEncoder::to_tensors() const {
  NamedTensors t;
  t.emplace_back("embeddings.token", token_embedding_);
  t.emplace_back("embeddings.position", position_embedding_);
  t.emplace_back("embeddings.ln_gain", emb_ln_gain_);
  t.emplace_back("embeddings.ln_bias", emb_ln_bias_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const auto p = "layer" + std::to_string(i) + ".";
    t.emplace_back(p + "wq", l.wq);
    t.emplace_back(p + "bq", l.bq);
    t.emplace_back(p + "wk", l.wk);
    t.emplace_back(p + "bk", l.bk);
    t.emplace_back(p + "wv", l.wv);
    t.emplace_back(p + "bv", l.bv);
    t.emplace_back(p + "wo", l.wo);
    t.emplace_back(p + "bo", l.bo);
    t.emplace_back(p + "ln1_gain", l.ln1_gain);
    t.emplace_back(p + "ln1_bias", l.ln1_bias);
    t.emplace_back(p + "w1", l.w1);
    t.emplace_back(p + "b1", l.b1);
    t.emplace_back(p + "w2", l.w2);
    t.emplace_back(p + "b2", l.b2);
    t.emplace_back(p + "ln2_gain", l.ln2_gain);
    t.emplace_back(p + "ln2_bias", l.ln2_bias);
  }
  t.emplace_back("pooler.w", pooler_w_);
  t.emplace_back("pooler.b", pooler_b_);
  return t;
}

void TransformerEncoder::from_tensors(const NamedTensors& t) {
  auto get = [&](const std::string& name, auto& dst) {
    dst = tensor_at(t, name, dst.rows(), dst.cols());
  };
  get("embeddings.token", token_embedding_);
  get("embeddings.position", position_embedding_);
  get("embeddings.ln_gain", emb_ln_gain_);
  get("embeddings.ln_bias", emb_ln_bias_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const auto p = "layer" + std::to_string(i) + ".";
    get(p + "wq", l.wq);
    get(p + "bq", l.bq);
    get(p + "wk", l.wk);
    get(p + "bk", l.bk);
    get(p + "wv", l.wv);
    get(p + "bv", l.bv);
    get(p + "wo", l.wo);
    get(p + "bo", l.bo);
    get(p + "ln1_gain", l.ln1_gain);
    get(p + "ln1_bias", l.ln1_bias);
    get(p + "w1", l.w1);
    get(p + "b1", l.b1);
    get(p + "w2", l.w2);
    get(p + "b2", l.b2);
    get(p + "ln2_gain", l.ln2_gain);
    get(p + "ln2_bias", l.ln2_bias);
  }
  get("pooler.w", pooler_w_);
  get("pooler.b", pooler_b_);
}

TransformerEncoder TransformerEncoder::load(const EncoderConfig& config) {
  const std::filesystem::path dir(config.checkpoint);
  const auto cfg_path = dir / "config.json";
  const auto weights_path = dir / "weights.bin";
  if (!std::filesystem::exists(cfg_path) || !std::filesystem::exists(weights_path))
    throw ConfigError("transformer checkpoint not found in '" + config.checkpoint + "'");
  const auto j = nlohmann::json::parse(read_file(cfg_path));
  TransformerEncoder enc(config, TransformerArch::from_json(j.at("architecture")));
  enc.from_tensors(read_tensors(weights_path));
  return enc;
}

void TransformerEncoder::init_checkpoint(const std::filesystem::path& dir,
                                         const TransformerArch& arch, std::uint64_t seed,
                                         std::uint64_t hash_seed) {
  EncoderConfig cfg;
  cfg.backend = EncoderBackend::transformer;
  cfg.checkpoint = dir.string();
  cfg.trainable_depth = std::min<std::size_t>(cfg.trainable_depth, arch.layers);
  cfg.max_tokens = arch.max_positions;
  cfg.hash_seed = hash_seed;
  TransformerEncoder enc(cfg, arch);
  enc.randomize(seed);
  enc.save(dir);
}

std::unique_ptr<Encoder> TransformerEncoder::clone() const {
  return std::make_unique<TransformerEncoder>(*this);
}

void TransformerEncoder::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto j = config_.to_json();
  j["checkpoint"] = "";
  j["architecture"] = arch_.to_json();
  write_file_atomic(dir / "config.json", j.dump(2) + "\n");
  write_tensors(dir / "weights.bin", to_tensors());
}

MatrixXd TransformerEncoder::prepare(const CompositeInput& input) const {
  const auto limit = std::min(config_.max_tokens, arch_.max_positions);
  auto ids = transformer_token_ids(input.rendered, arch_.vocab_size, config_.hash_seed, limit);
  if (ids.empty()) ids.push_back(0);
  const auto t = static_cast<Eigen::Index>(ids.size());
  MatrixXd x(t, static_cast<Eigen::Index>(arch_.hidden));
  for (Eigen::Index i = 0; i < t; ++i)
    x.row(i) = token_embedding_.row(static_cast<Eigen::Index>(ids[i])) + position_embedding_.row(i);
  x = layer_norm(x, emb_ln_gain_, emb_ln_bias_, nullptr);
  for (std::size_t l = 0; l < first_trainable(); ++l) x = layer_forward(layers_[l], arch_.heads, x, nullptr);
  return x;
}

VectorXd TransformerEncoder::forward(const MatrixXd& prepared,
                                     std::unique_ptr<EncoderTape>* tape) const {
  std::unique_ptr<TransformerTape> rec;
  if (tape) rec = std::make_unique<TransformerTape>();
  MatrixXd x = prepared;
  for (std::size_t l = first_trainable(); l < arch_.layers; ++l) {
    LayerCache* cache = nullptr;
    if (rec) cache = &rec->layers.emplace_back();
    x = layer_forward(layers_[l], arch_.heads, x, cache);
  }
  const RowVectorXd mean = x.colwise().mean();
  const VectorXd out = ((mean * pooler_w_ + pooler_b_).array().tanh()).matrix().transpose();
  if (rec) {
    rec->top = std::move(x);
    rec->mean = mean;
    rec->out = out;
    *tape = std::move(rec);
  }
  return out;
}

std::vector<ParamView> TransformerEncoder::parameters() {
  std::vector<ParamView> p;
  if (config_.trainable_depth == 0) return p;
  auto add = [&](const std::string& name, auto& m, bool decay) {
    p.push_back({name, m.data(), static_cast<std::size_t>(m.size()), decay});
  };
  for (std::size_t i = first_trainable(); i < arch_.layers; ++i) {
    auto& l = layers_[i];
    const auto pre = "layer" + std::to_string(i) + ".";
    add(pre + "wq", l.wq, true);
    add(pre + "bq", l.bq, false);
    add(pre + "wk", l.wk, true);
    add(pre + "bk", l.bk, false);
    add(pre + "wv", l.wv, true);
    add(pre + "bv", l.bv, false);
    add(pre + "wo", l.wo, true);
    add(pre + "bo", l.bo, false);
    add(pre + "ln1_gain", l.ln1_gain, false);
    add(pre + "ln1_bias", l.ln1_bias, false);
    add(pre + "w1", l.w1, true);
    add(pre + "b1", l.b1, false);
    add(pre + "w2", l.w2, true);
    add(pre + "b2", l.b2, false);
    add(pre + "ln2_gain", l.ln2_gain, false);
    add(pre + "ln2_bias", l.ln2_bias, false);
  }
  add("pooler.w", pooler_w_, true);
  add("pooler.b", pooler_b_, false);
  return p;
}

void TransformerEncoder::backward(const EncoderTape& tape, const VectorXd& d_out,
                                  std::vector<VectorXd>& grads) const {
  if (config_.trainable_depth == 0) return;
  const auto& rec = dynamic_cast<const TransformerTape&>(tape);
  const auto h = static_cast<Eigen::Index>(arch_.hidden);
  const auto f = static_cast<Eigen::Index>(arch_.ffn);
  const auto od = static_cast<Eigen::Index>(arch_.output_dim);

  const std::size_t n_layers = config_.trainable_depth;
  const std::size_t pooler_slot = n_layers * 16;
  const RowVectorXd dz = (d_out.array() * (1.0 - rec.out.array().square())).matrix().transpose();
  Eigen::Map<MatrixXd>(grads[pooler_slot].data(), h, od) += rec.mean.transpose() * dz;
  Eigen::Map<RowVectorXd>(grads[pooler_slot + 1].data(), od) += dz;
  const RowVectorXd dmean = dz * pooler_w_.transpose();
  MatrixXd dx = dmean.replicate(rec.top.rows(), 1) / static_cast<double>(rec.top.rows());

  for (std::size_t k = n_layers; k-- > 0;) {
    const std::size_t s = k * 16;
    auto m = [&](std::size_t i, Eigen::Index r, Eigen::Index c) {
      return Eigen::Map<MatrixXd>(grads[s + i].data(), r, c);
    };
    auto rv = [&](std::size_t i, Eigen::Index n) {
      return Eigen::Map<RowVectorXd>(grads[s + i].data(), n);
    };
    LayerGrads g{m(0, h, h), m(2, h, h), m(4, h, h), m(6, h, h), rv(1, h),  rv(3, h),
                 rv(5, h),   rv(7, h),   rv(8, h),   rv(9, h),   m(10, h, f), rv(11, f),
                 m(12, f, h), rv(13, h), rv(14, h), rv(15, h)};
    dx = layer_backward(layers_[first_trainable() + k], arch_.heads, rec.layers[k], dx, g);
  }
}

}  // namespace cotd
