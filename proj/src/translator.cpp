#include "rad2ct/translator.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "rad2ct/error.hpp"

namespace rad2ct {

namespace {

Tensor normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(n(rng));
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Row-vector times matrix plus bias, in the same summation order as linear().
void affine(const Real* x, const Tensor& weight, const Tensor& bias, Real* out) {
  const std::size_t k = weight.dim(0), p = weight.dim(1);
  auto w = weight.values();
  auto b = bias.values();
  std::fill(out, out + p, Real(0));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const Real s = x[kk];
    const Real* row = &w[kk * p];
    for (std::size_t j = 0; j < p; ++j) out[j] += s * row[j];
  }
  for (std::size_t j = 0; j < p; ++j) out[j] = out[j] + b[j];
}

// Same arithmetic as layer_norm() for one row.
void norm_row(const Real* x, std::size_t c, const Tensor& gain, const Tensor& bias, Real* out) {
  auto g = gain.values();
  auto b = bias.values();
  Real mu = 0;
  for (std::size_t i = 0; i < c; ++i) mu += x[i];
  mu /= static_cast<Real>(c);
  Real var = 0;
  for (std::size_t i = 0; i < c; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= static_cast<Real>(c);
  const Real rs = Real(1) / std::sqrt(var + Real(1e-5));
  for (std::size_t i = 0; i < c; ++i) out[i] = (x[i] - mu) * rs * g[i] + b[i];
}

}  // namespace

std::vector<TokenId> flatten_tokens(const TokenGrid& g) {
  if (g.indices.size() != g.size()) throw DimensionError("token grid holds " + std::to_string(g.indices.size()) +
                                                         " indices for extents of " + std::to_string(g.size()));
  return g.indices;  // stored in raster order already
}

TokenGrid unflatten_tokens(std::span<const TokenId> tokens, std::size_t height, std::size_t width, std::size_t depth,
                           Modality modality) {
  TokenGrid g{height, width, depth, {tokens.begin(), tokens.end()}, modality};
  if (g.indices.size() != g.size()) {
    throw DimensionError("unflatten_tokens: " + std::to_string(tokens.size()) + " tokens for a " +
                         std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(depth) + " grid");
  }
  return g;
}

SpanKind SequenceLayout::span_at(std::size_t position) const {
  if (position == 0) return SpanKind::sos;
  if (position < lat_begin()) return SpanKind::pa;
  if (position < ct_begin()) return SpanKind::lat;
  if (position < total()) return SpanKind::ct;
  throw IndexError("sequence position " + std::to_string(position) + " beyond layout length " +
                   std::to_string(total()));
}

std::pair<TokenId, TokenId> allowed_range(const SequenceLayout& layout, std::size_t position,
                                          std::size_t codebook_size) {
  const auto n = static_cast<TokenId>(codebook_size);
  switch (layout.span_at(position)) {
    case SpanKind::sos: return {2 * n, 2 * n + 1};
    case SpanKind::pa:
    case SpanKind::lat: return {0, n};
    case SpanKind::ct: return {n, 2 * n};
  }
  return {0, 0};
}

TranslationSequence build_sequence(const TokenGrid& pa, const TokenGrid& lat, const TokenGrid& ct,
                                   std::size_t codebook_size) {
  if (pa.modality != Modality::thrx || lat.modality != Modality::thrx) {
    throw UsageError("build_sequence: PA and lateral grids must hold radiograph tokens");
  }
  if (ct.modality != Modality::ct) throw UsageError("build_sequence: third grid must hold CT tokens");
  const auto n = static_cast<TokenId>(codebook_size);
  TranslationSequence seq;
  seq.codebook_size = codebook_size;
  seq.layout = {pa.size(), lat.size(), ct.size()};
  seq.tokens.reserve(seq.layout.total());
  seq.tokens.push_back(2 * n);
  for (const TokenGrid* g : {&pa, &lat, &ct}) {
    const TokenId offset = g == &ct ? n : 0;
    for (TokenId t : flatten_tokens(*g)) {
      if (t < 0 || t >= n) throw IndexError("build_sequence: token " + std::to_string(t) + " outside codebook");
      seq.tokens.push_back(t + offset);
    }
  }
  return seq;
}

TokenGrid ct_grid(std::span<const TokenId> sequence, const SequenceLayout& layout, std::size_t codebook_size,
                  std::size_t height, std::size_t width, std::size_t depth) {
  if (sequence.size() != layout.total()) {
    throw DimensionError("ct_grid: sequence length " + std::to_string(sequence.size()) + " differs from layout " +
                         std::to_string(layout.total()));
  }
  const auto n = static_cast<TokenId>(codebook_size);
  std::vector<TokenId> ct(sequence.begin() + static_cast<std::ptrdiff_t>(layout.ct_begin()), sequence.end());
  for (auto& t : ct) {
    if (t < n || t >= 2 * n) throw DataError("ct_grid: token " + std::to_string(t) + " outside the CT range");
    t -= n;
  }
  return unflatten_tokens(ct, height, width, depth, Modality::ct);
}

void TranslatorConfig::validate() const {
  if (blocks == 0 || heads == 0 || embed == 0) throw UsageError("translator needs blocks, heads and width > 0");
  if (embed % heads != 0) {
    throw UsageError("translator embedding width " + std::to_string(embed) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (codebook_size < 2) throw UsageError("translator codebook size must be at least 2");
  if (context < 2) throw UsageError("translator context must hold at least 2 tokens");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("translator dropout must lie in [0, 1)");
}

Config TranslatorConfig::to_config(const std::string& prefix) const {
  Config c;
  c.set(prefix + ".blocks", std::to_string(blocks));
  c.set(prefix + ".heads", std::to_string(heads));
  c.set(prefix + ".embed", std::to_string(embed));
  c.set(prefix + ".context", std::to_string(context));
  c.set(prefix + ".codebook_size", std::to_string(codebook_size));
  std::ostringstream d;
  d.precision(17);
  d << dropout;
  c.set(prefix + ".dropout", d.str());
  return c;
}

TranslatorConfig TranslatorConfig::from_config(const Config& cfg, const std::string& prefix, TranslatorConfig d) {
  TranslatorConfig out;
  out.blocks = cfg.get_size(prefix + ".blocks", d.blocks);
  out.heads = cfg.get_size(prefix + ".heads", d.heads);
  out.embed = cfg.get_size(prefix + ".embed", d.embed);
  out.context = cfg.get_size(prefix + ".context", d.context);
  out.codebook_size = cfg.get_size(prefix + ".codebook_size", d.codebook_size);
  out.dropout = cfg.get_double(prefix + ".dropout", d.dropout);
  out.validate();
  return out;
}

TranslatorConfig TranslatorConfig::desk() { return TranslatorConfig{}; }

TranslatorConfig TranslatorConfig::paper() {
  TranslatorConfig c;
  c.blocks = 8;
  c.heads = 8;
  c.embed = 512;
  c.codebook_size = 8192;
  c.context = 1 + 256 + 256 + 4096;
  return c;
}

SamplingStrategy parse_sampling(const std::string& name) {
  if (name == "greedy") return SamplingStrategy::greedy;
  if (name == "top_k" || name == "topk") return SamplingStrategy::top_k;
  throw UsageError("unknown sampling strategy '" + name + "' (expected greedy or top_k)");
}

struct Translator::Cache {
  std::vector<std::vector<Real>> keys;    // per block, position-major [pos × C]
  std::vector<std::vector<Real>> values;
};

Translator::Translator(TranslatorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), dropout_rng_(seed ^ 0x5eed) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t c = cfg_.embed, v = cfg_.vocab();
  const double sd = 0.02, sd_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.blocks));
  token_embedding_ = normal_param({v, c}, sd, rng);
  position_embedding_ = normal_param({cfg_.context, c}, sd, rng);
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    Block blk;
    blk.ln1_gain = Tensor::full({c}, Real(1), true);
    blk.ln1_bias = Tensor::zeros({c}, true);
    blk.attn_weight = normal_param({c, 3 * c}, sd, rng);
    blk.attn_bias = Tensor::zeros({3 * c}, true);
    blk.proj_weight = normal_param({c, c}, sd_out, rng);
    blk.proj_bias = Tensor::zeros({c}, true);
    blk.ln2_gain = Tensor::full({c}, Real(1), true);
    blk.ln2_bias = Tensor::zeros({c}, true);
    blk.ff1_weight = normal_param({c, 4 * c}, sd, rng);
    blk.ff1_bias = Tensor::zeros({4 * c}, true);
    blk.ff2_weight = normal_param({4 * c, c}, sd_out, rng);
    blk.ff2_bias = Tensor::zeros({c}, true);
    blocks_.push_back(std::move(blk));
  }
  lnf_gain_ = Tensor::full({c}, Real(1), true);
  lnf_bias_ = Tensor::zeros({c}, true);
  head_weight_ = normal_param({c, v}, sd, rng);
  head_bias_ = Tensor::zeros({v}, true);
}

void Translator::check_tokens(std::span<const TokenId> tokens) const {
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab()) {
      throw IndexError("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg_.vocab()));
    }
  }
}

Tensor Translator::forward(std::span<const TokenId> tokens) const {
  return const_cast<Translator*>(this)->forward_batch(tokens, 1, tokens.size(), false);
}

Tensor Translator::forward_batch(std::span<const TokenId> tokens, std::size_t batch, std::size_t seq, bool train) {
  if (seq == 0 || tokens.size() != batch * seq) {
    throw DimensionError("translator: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) +
                         " x length " + std::to_string(seq));
  }
  if (seq > cfg_.context) {
    throw UsageError("sequence of length " + std::to_string(seq) + " exceeds translator context " +
                     std::to_string(cfg_.context));
  }
  check_tokens(tokens);
  const Real p = train ? static_cast<Real>(cfg_.dropout) : Real(0);
  std::vector<TokenId> positions(batch * seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % seq);
  Tensor x = add(embedding(token_embedding_, tokens), embedding(position_embedding_, positions));
  x = dropout(x, p, dropout_rng_);
  for (const auto& blk : blocks_) {
    Tensor h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    Tensor a = causal_attention(linear(h, blk.attn_weight, blk.attn_bias), batch, seq, cfg_.heads);
    x = add(x, dropout(linear(a, blk.proj_weight, blk.proj_bias), p, dropout_rng_));
    h = layer_norm(x, blk.ln2_gain, blk.ln2_bias);
    Tensor f = linear(silu(linear(h, blk.ff1_weight, blk.ff1_bias)), blk.ff2_weight, blk.ff2_bias);
    x = add(x, dropout(f, p, dropout_rng_));
  }
  return linear(layer_norm(x, lnf_gain_, lnf_bias_), head_weight_, head_bias_);
}

Tensor Translator::loss(std::span<const TranslationSequence> batch, bool train) {
  if (batch.empty()) throw UsageError("translator loss: empty batch");
  const std::size_t t = batch[0].tokens.size();
  if (t < 2) throw UsageError("translator loss: sequences need at least 2 tokens");
  std::vector<TokenId> inputs, targets;
  inputs.reserve(batch.size() * (t - 1));
  targets.reserve(batch.size() * (t - 1));
  for (const auto& s : batch) {
    if (s.tokens.size() != t) throw UsageError("translator loss: sequences in a batch must share one length");
    inputs.insert(inputs.end(), s.tokens.begin(), s.tokens.end() - 1);
    targets.insert(targets.end(), s.tokens.begin() + 1, s.tokens.end());
  }
  return cross_entropy(forward_batch(inputs, batch.size(), t - 1, train), targets);
}

void Translator::step(TokenId token, std::size_t position, Cache& cache, std::vector<Real>& logits) const {
  const std::size_t c = cfg_.embed, hd = c / cfg_.heads;
  const Real sc = Real(1) / std::sqrt(static_cast<Real>(hd));
  auto te = token_embedding_.values();
  auto pe = position_embedding_.values();
  std::vector<Real> x(c), h(c), qkv(3 * c), att(c), proj(c), ff(4 * c), out(c);
  for (std::size_t i = 0; i < c; ++i) x[i] = te[static_cast<std::size_t>(token) * c + i] + pe[position * c + i];
  const std::size_t len = position + 1;
  std::vector<Real> scores(len);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    norm_row(x.data(), c, blk.ln1_gain, blk.ln1_bias, h.data());
    affine(h.data(), blk.attn_weight, blk.attn_bias, qkv.data());
    auto& keys = cache.keys[b];
    auto& vals = cache.values[b];
    keys.insert(keys.end(), qkv.begin() + static_cast<std::ptrdiff_t>(c), qkv.begin() + static_cast<std::ptrdiff_t>(2 * c));
    vals.insert(vals.end(), qkv.begin() + static_cast<std::ptrdiff_t>(2 * c), qkv.end());
    std::fill(att.begin(), att.end(), Real(0));
    for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
      const Real* q = &qkv[hh * hd];
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t u = 0; u < len; ++u) {
        const Real* k = &keys[u * c + hh * hd];
        Real s = 0;
        for (std::size_t i = 0; i < hd; ++i) s += q[i] * k[i];
        scores[u] = s * sc;
        mx = std::max(mx, scores[u]);
      }
      Real z = 0;
      for (std::size_t u = 0; u < len; ++u) {
        scores[u] = std::exp(scores[u] - mx);
        z += scores[u];
      }
      Real* o = &att[hh * hd];
      for (std::size_t u = 0; u < len; ++u) {
        scores[u] /= z;
        const Real* v = &vals[u * c + hh * hd];
        for (std::size_t i = 0; i < hd; ++i) o[i] += scores[u] * v[i];
      }
    }
    affine(att.data(), blk.proj_weight, blk.proj_bias, proj.data());
    for (std::size_t i = 0; i < c; ++i) x[i] = x[i] + proj[i];
    norm_row(x.data(), c, blk.ln2_gain, blk.ln2_bias, h.data());
    affine(h.data(), blk.ff1_weight, blk.ff1_bias, ff.data());
    for (auto& f : ff) {
      const Real s = Real(1) / (Real(1) + std::exp(-f));
      f = f * s;
    }
    affine(ff.data(), blk.ff2_weight, blk.ff2_bias, out.data());
    for (std::size_t i = 0; i < c; ++i) x[i] = x[i] + out[i];
  }
  norm_row(x.data(), c, lnf_gain_, lnf_bias_, h.data());
  logits.resize(cfg_.vocab());
  affine(h.data(), head_weight_, head_bias_, logits.data());
}

std::vector<Real> Translator::cached_logits(std::span<const TokenId> tokens) const {
  if (tokens.size() > cfg_.context) throw UsageError("sequence exceeds translator context");
  check_tokens(tokens);
  Cache cache{std::vector<std::vector<Real>>(blocks_.size()), std::vector<std::vector<Real>>(blocks_.size())};
  std::vector<Real> all, logits;
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    step(tokens[pos], pos, cache, logits);
    all.insert(all.end(), logits.begin(), logits.end());
  }
  return all;
}

std::vector<TokenId> Translator::generate(std::span<const TokenId> prompt, const SequenceLayout& layout,
                                          std::size_t count, const SamplingConfig& sampling) const {
  if (prompt.empty() || prompt[0] != cfg_.sos()) throw UsageError("generation prompt must start with the SOS token");
  if (prompt.size() + count > cfg_.context) {
    throw UsageError("prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(count) +
                     " generated tokens exceeds translator context " + std::to_string(cfg_.context));
  }
  if (prompt.size() + count > layout.total()) {
    throw UsageError("prompt plus generated tokens exceed the sequence layout length " + std::to_string(layout.total()));
  }
  if (sampling.strategy == SamplingStrategy::top_k && (sampling.top_k == 0 || !(sampling.temperature > 0))) {
    throw UsageError("top-k sampling needs k >= 1 and a positive temperature");
  }
  check_tokens(prompt);
  Cache cache{std::vector<std::vector<Real>>(blocks_.size()), std::vector<std::vector<Real>>(blocks_.size())};
  std::vector<Real> logits;
  for (std::size_t pos = 0; pos < prompt.size(); ++pos) step(prompt[pos], pos, cache, logits);

  std::mt19937_64 rng(sampling.seed);
  std::vector<TokenId> out;
  out.reserve(count);
  std::vector<std::pair<Real, TokenId>> ranked;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t pos = prompt.size() + i;
    const auto [lo, hi] = allowed_range(layout, pos, cfg_.codebook_size);
    TokenId choice = lo;
    if (sampling.strategy == SamplingStrategy::greedy) {
      for (TokenId t = lo + 1; t < hi; ++t) {
        if (logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(choice)]) choice = t;
      }
    } else {
      ranked.clear();
      for (TokenId t = lo; t < hi; ++t) ranked.emplace_back(logits[static_cast<std::size_t>(t)], t);
      const std::size_t k = std::min(sampling.top_k, ranked.size());
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(),
                        [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
      std::vector<double> w(k);
      const double top = ranked[0].first;
      double total = 0;
      for (std::size_t j = 0; j < k; ++j) {
        w[j] = std::exp((ranked[j].first - top) / sampling.temperature);
        total += w[j];
      }
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      choice = ranked[k - 1].second;
      for (std::size_t j = 0; j < k; ++j) {
        if (u < w[j]) {
          choice = ranked[j].second;
          break;
        }
        u -= w[j];
      }
    }
    if (choice < lo || choice >= hi) throw NumericalError("generated token escaped its span vocabulary");
    out.push_back(choice);
    if (i + 1 < count) step(choice, pos, cache, logits);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Translator::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", token_embedding_}, {"pos_emb", position_embedding_}};
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& k = blocks_[b];
    const std::string p = "block." + std::to_string(b) + ".";
    out.insert(out.end(), {{p + "ln1.gain", k.ln1_gain},     {p + "ln1.bias", k.ln1_bias},
                           {p + "attn.weight", k.attn_weight}, {p + "attn.bias", k.attn_bias},
                           {p + "proj.weight", k.proj_weight}, {p + "proj.bias", k.proj_bias},
                           {p + "ln2.gain", k.ln2_gain},     {p + "ln2.bias", k.ln2_bias},
                           {p + "ff1.weight", k.ff1_weight},   {p + "ff1.bias", k.ff1_bias},
                           {p + "ff2.weight", k.ff2_weight},   {p + "ff2.bias", k.ff2_bias}});
  }
  out.insert(out.end(), {{"lnf.gain", lnf_gain_}, {"lnf.bias", lnf_bias_}, {"head.weight", head_weight_},
                         {"head.bias", head_bias_}});
  return out;
}

std::vector<Tensor> Translator::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

Checkpoint Translator::to_checkpoint(const std::string& stage, std::uint64_t seed) const {
  Checkpoint ckpt;
  ckpt.header = cfg_.to_config("model");
  ckpt.header.set("checkpoint.stage", stage);
  ckpt.header.set("checkpoint.seed", std::to_string(seed));
  ckpt.header.set("checkpoint.raster", kRasterOrder);
  for (const auto& [name, t] : named_tensors()) ckpt.blobs.push_back(to_blob(name, t));
  return ckpt;
}

Translator Translator::from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = TranslatorConfig::from_config(ckpt.header, "model", TranslatorConfig{});
  Translator tr(cfg, static_cast<std::uint64_t>(ckpt.header.get_int("checkpoint.seed", 0)));
  for (auto& [name, t] : tr.named_tensors()) {
    Tensor target = t;
    load_blob(ckpt.blob(name), target);
  }
  return tr;
}

std::string format_tokens(std::span<const TokenId> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::vector<TokenId> parse_tokens(const std::string& line) {
  std::vector<TokenId> out;
  const char* begin = line.data();
  const char* end = begin + line.size();
  const char* p = begin;
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    if (p == end) break;
    TokenId v = 0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc{} || (next < end && *next != ' ' && *next != '\t' && *next != '\r')) {
      throw ParseError("token text: expected an integer", static_cast<std::size_t>(p - begin));
    }
    out.push_back(v);
    p = next;
  }
  return out;
}

}  // namespace rad2ct
