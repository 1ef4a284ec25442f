#include "rad2ct/autoencoder.hpp"

#include <cmath>
#include <random>

#include "rad2ct/error.hpp"

namespace rad2ct {

namespace {

constexpr std::size_t kDownKernel = 4;
constexpr std::size_t kOutKernel = 3;

Shape kernel_shape(std::size_t out_ch, std::size_t in_ch, std::size_t k, int rank) {
  Shape s{out_ch, in_ch, k, k};
  if (rank == 3) s.push_back(k);
  return s;
}

Tensor uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::size_t group_count(std::size_t channels, std::size_t preferred) {
  std::size_t g = std::min(preferred, channels);
  while (g > 1 && channels % g != 0) --g;
  return std::max<std::size_t>(g, 1);
}

Extents3 parse_extents(const std::vector<std::size_t>& v, const std::string& key) {
  if (v.size() != 3) throw UsageError("config: '" + key + "' expects depth,height,width");
  return {v[0], v[1], v[2]};
}

}  // namespace

Extents3 AutoencoderConfig::latent_extents() const {
  const std::size_t f = std::size_t{1} << stages();
  return {rank == 2 ? 1 : input.depth / f, input.height / f, input.width / f};
}

void AutoencoderConfig::validate() const {
  if (rank != 2 && rank != 3) throw UsageError("autoencoder rank must be 2 or 3");
  if (channels.empty()) throw UsageError("autoencoder needs at least one downsampling stage");
  for (auto c : channels) {
    if (c == 0) throw UsageError("autoencoder channel widths must be positive");
  }
  if (latent_dim == 0) throw UsageError("latent dimension must be positive");
  if (codebook_size < 2) throw UsageError("codebook needs at least 2 entries");
  if (rank == 2 && input.depth != 1) throw UsageError("rank-2 autoencoder input depth must be 1");
  const std::size_t f = std::size_t{1} << stages();
  auto check = [&](std::size_t n, const char* axis) {
    if (n == 0 || n % f != 0) {
      throw UsageError(std::string("autoencoder input ") + axis + " extent " + std::to_string(n) +
                       " is not divisible by 2^" + std::to_string(stages()));
    }
  };
  check(input.height, "height");
  check(input.width, "width");
  if (rank == 3) check(input.depth, "depth");
}

Config AutoencoderConfig::to_config(const std::string& prefix) const {
  Config c;
  c.set(prefix + ".rank", std::to_string(rank));
  c.set(prefix + ".input", join_sizes({input.depth, input.height, input.width}));
  c.set(prefix + ".channels", join_sizes(channels));
  c.set(prefix + ".latent_dim", std::to_string(latent_dim));
  c.set(prefix + ".codebook_size", std::to_string(codebook_size));
  std::ostringstream beta_s, l1_s;
  beta_s.precision(17);
  l1_s.precision(17);
  beta_s << beta;
  l1_s << l1_weight;
  c.set(prefix + ".beta", beta_s.str());
  c.set(prefix + ".l1_weight", l1_s.str());
  c.set(prefix + ".groups", std::to_string(groups));
  return c;
}

AutoencoderConfig AutoencoderConfig::from_config(const Config& cfg, const std::string& prefix,
                                                 AutoencoderConfig d) {
  AutoencoderConfig out;
  out.rank = static_cast<int>(cfg.get_int(prefix + ".rank", d.rank));
  out.input = parse_extents(cfg.get_size_list(prefix + ".input", {d.input.depth, d.input.height, d.input.width}),
                            prefix + ".input");
  out.channels = cfg.get_size_list(prefix + ".channels", d.channels);
  out.latent_dim = cfg.get_size(prefix + ".latent_dim", d.latent_dim);
  out.codebook_size = cfg.get_size(prefix + ".codebook_size", d.codebook_size);
  out.beta = cfg.get_double(prefix + ".beta", d.beta);
  out.l1_weight = cfg.get_double(prefix + ".l1_weight", d.l1_weight);
  out.groups = cfg.get_size(prefix + ".groups", d.groups);
  out.validate();
  return out;
}

AutoencoderConfig AutoencoderConfig::desk_2d() {
  AutoencoderConfig c;
  c.rank = 2;
  c.input = {1, 32, 32};
  c.channels = {16, 32, 64};
  return c;
}

AutoencoderConfig AutoencoderConfig::desk_3d() { return AutoencoderConfig{}; }

Tensor reconstruction_loss(const Tensor& x, const Tensor& x_hat, int rank, Real l1_weight) {
  if (x.shape() != x_hat.shape()) {
    throw DimensionError("reconstruction_loss: shape mismatch " + to_string(x.shape()) + " vs " +
                         to_string(x_hat.shape()));
  }
  // rank 3 tensors are [B, C, D, H, W]: one slice per (b, c, d); rank 2 one per (b, c)
  const std::size_t slices = rank == 3 ? x.dim(0) * x.dim(1) * x.dim(2) : x.dim(0) * x.dim(1);
  return add(mse_loss(x, x_hat), scale(slice_l1_loss(x, x_hat, slices), l1_weight));
}

Autoencoder::Autoencoder(AutoencoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int r = cfg_.rank;
  const double kvol_down = std::pow(static_cast<double>(kDownKernel), r);
  const double kvol_out = std::pow(static_cast<double>(kOutKernel), r);
  // variance 1/fan_in
  auto layer = [&](const std::string& name, Shape shape, double fan_in) {
    const std::size_t out_ch = shape[0];
    return Layer{name, uniform_param(std::move(shape), std::sqrt(3.0 / fan_in), rng), Tensor::zeros({out_ch}, true)};
  };
  auto transposed = [&](const std::string& name, std::size_t in_ch, std::size_t out_ch) {
    // each output sees in_ch · (k/stride)^r taps
    const double fan_in = static_cast<double>(in_ch) * kvol_down / std::pow(2.0, r);
    return Layer{name, uniform_param(kernel_shape(in_ch, out_ch, kDownKernel, r), std::sqrt(3.0 / fan_in), rng),
                 Tensor::zeros({out_ch}, true)};
  };
  auto norm = [&](const std::string& name, std::size_t c) {
    return Norm{name, Tensor::full({c}, Real(1), true), Tensor::zeros({c}, true), group_count(c, cfg_.groups)};
  };

  const auto& ch = cfg_.channels;
  const std::size_t stages = ch.size();
  std::size_t in_ch = 1;
  for (std::size_t s = 0; s < stages; ++s) {
    const std::string n = "enc." + std::to_string(s);
    enc_.push_back(layer(n, kernel_shape(ch[s], in_ch, kDownKernel, r), static_cast<double>(in_ch) * kvol_down));
    enc_norm_.push_back(norm(n + ".norm", ch[s]));
    in_ch = ch[s];
  }
  enc_out_ = layer("enc.out", kernel_shape(cfg_.latent_dim, ch.back(), 1, r), static_cast<double>(ch.back()));
  dec_in_ = layer("dec.in", kernel_shape(ch.back(), cfg_.latent_dim, 1, r), static_cast<double>(cfg_.latent_dim));
  for (std::size_t i = 0; i < stages; ++i) {
    const std::size_t from = ch[stages - 1 - i];
    const std::size_t to = i + 1 < stages ? ch[stages - 2 - i] : ch[0];
    const std::string n = "dec." + std::to_string(i);
    dec_.push_back(transposed(n, from, to));
    dec_norm_.push_back(norm(n + ".norm", to));
  }
  dec_out_ = layer("dec.out", kernel_shape(1, ch[0], kOutKernel, r), static_cast<double>(ch[0]) * kvol_out);
  codebook_ = Codebook(cfg_.codebook_size, cfg_.latent_dim, rng);
}

Shape Autoencoder::input_shape(std::size_t batch) const {
  if (cfg_.rank == 2) return {batch, 1, cfg_.input.height, cfg_.input.width};
  return {batch, 1, cfg_.input.depth, cfg_.input.height, cfg_.input.width};
}

Tensor Autoencoder::encode(const Tensor& x) const {
  if (x.rank() == 0 || x.shape() != input_shape(x.dim(0))) {
    throw DimensionError("encode: input " + to_string(x.shape()) + " does not match configured extents " +
                         to_string(input_shape(x.rank() ? x.dim(0) : 1)));
  }
  Tensor h = x;
  for (std::size_t s = 0; s < enc_.size(); ++s) {
    h = conv(h, enc_[s].weight, enc_[s].bias, 2, 1, cfg_.rank);
    h = silu(group_norm(h, enc_norm_[s].groups, enc_norm_[s].gain, enc_norm_[s].bias));
  }
  return conv(h, enc_out_.weight, enc_out_.bias, 1, 0, cfg_.rank);
}

Tensor Autoencoder::decode(const Tensor& e) const {
  const Extents3 lat = cfg_.latent_extents();
  Shape expected{e.rank() ? e.dim(0) : 1, cfg_.latent_dim};
  if (cfg_.rank == 3) expected.push_back(lat.depth);
  expected.push_back(lat.height);
  expected.push_back(lat.width);
  if (e.shape() != expected) {
    throw DimensionError("decode: latent " + to_string(e.shape()) + " does not match configured " + to_string(expected));
  }
  Tensor h = silu(conv(e, dec_in_.weight, dec_in_.bias, 1, 0, cfg_.rank));
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    h = conv_transpose(h, dec_[i].weight, dec_[i].bias, 2, 1, cfg_.rank);
    h = silu(group_norm(h, dec_norm_[i].groups, dec_norm_[i].gain, dec_norm_[i].bias));
  }
  return tanh(conv(h, dec_out_.weight, dec_out_.bias, 1, 1, cfg_.rank));
}

Autoencoder::Step Autoencoder::forward(const Tensor& x, bool count_usage) {
  Step step;
  Tensor z = encode(x);
  step.latent_rows = channels_last(z);
  Quantized q = quantize(step.latent_rows, codebook_, count_usage);
  step.indices = std::move(q.indices);
  step.reconstruction = decode(channels_first(q.quantized, z.shape()));
  step.vq = vq_loss(x, step.reconstruction, step.latent_rows, q.selected, static_cast<Real>(cfg_.beta));
  const std::size_t slices = cfg_.rank == 3 ? x.dim(0) * x.dim(2) : x.dim(0);
  step.l1 = scale(slice_l1_loss(x, step.reconstruction, slices), static_cast<Real>(cfg_.l1_weight));
  step.loss = add(step.vq.total, step.l1);
  return step;
}

std::vector<TokenGrid> Autoencoder::tokenize(const Tensor& x) const {
  NoGradGuard no_grad;
  Tensor rows = channels_last(encode(x));
  const auto indices = nearest_entries(rows.values(), codebook_);
  const Extents3 lat = cfg_.latent_extents();
  const std::size_t per = lat.count();
  std::vector<TokenGrid> grids;
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    TokenGrid g{lat.height, lat.width, lat.depth, {}, cfg_.modality()};
    g.indices.assign(indices.begin() + static_cast<std::ptrdiff_t>(b * per),
                     indices.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
    grids.push_back(std::move(g));
  }
  return grids;
}

Tensor Autoencoder::decode_tokens(std::span<const TokenGrid> grids) const {
  NoGradGuard no_grad;
  const Extents3 lat = cfg_.latent_extents();
  std::vector<TokenId> indices;
  for (const auto& g : grids) {
    if (g.height != lat.height || g.width != lat.width || g.depth != lat.depth) {
      throw DimensionError("decode_tokens: token grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                           "x" + std::to_string(g.depth) + " does not match latent extents");
    }
    if (g.modality != cfg_.modality()) throw DataError("decode_tokens: token grid belongs to the other modality");
    for (auto i : g.indices) {
      if (i < 0 || static_cast<std::size_t>(i) >= codebook_.size()) {
        throw IndexError("decode_tokens: token " + std::to_string(i) + " outside codebook");
      }
    }
    indices.insert(indices.end(), g.indices.begin(), g.indices.end());
  }
  Shape shape{grids.size(), cfg_.latent_dim};
  if (cfg_.rank == 3) shape.push_back(lat.depth);
  shape.push_back(lat.height);
  shape.push_back(lat.width);
  return decode(channels_first(embedding(codebook_.entries(), indices), shape));
}

std::vector<std::pair<std::string, Tensor>> Autoencoder::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add_layer = [&](const Layer& l) {
    out.emplace_back(l.name + ".weight", l.weight);
    out.emplace_back(l.name + ".bias", l.bias);
  };
  auto add_norm = [&](const Norm& n) {
    out.emplace_back(n.name + ".gain", n.gain);
    out.emplace_back(n.name + ".bias", n.bias);
  };
  for (std::size_t s = 0; s < enc_.size(); ++s) {
    add_layer(enc_[s]);
    add_norm(enc_norm_[s]);
  }
  add_layer(enc_out_);
  add_layer(dec_in_);
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    add_layer(dec_[i]);
    add_norm(dec_norm_[i]);
  }
  add_layer(dec_out_);
  out.emplace_back("codebook", codebook_.entries());
  return out;
}

std::vector<Tensor> Autoencoder::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

Checkpoint Autoencoder::to_checkpoint(const std::string& stage, std::uint64_t seed) const {
  Checkpoint ckpt;
  ckpt.header = cfg_.to_config("model");
  ckpt.header.set("checkpoint.stage", stage);
  ckpt.header.set("checkpoint.seed", std::to_string(seed));
  ckpt.header.set("checkpoint.raster", kRasterOrder);
  for (const auto& [name, t] : named_tensors()) ckpt.blobs.push_back(to_blob(name, t));
  return ckpt;
}

Autoencoder Autoencoder::from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = AutoencoderConfig::from_config(ckpt.header, "model", AutoencoderConfig{});
  Autoencoder ae(cfg, static_cast<std::uint64_t>(ckpt.header.get_int("checkpoint.seed", 0)));
  for (auto& [name, t] : ae.named_tensors()) {
    Tensor target = t;
    load_blob(ckpt.blob(name), target);
  }
  return ae;
}

}  // namespace rad2ct
