#pragma once

// Decoder-only causal transformer over the joint sequence
//   [SOS][PA tokens][LAT tokens][CT tokens]
// in a shared vocabulary: [0, N) radiograph tokens, [N, 2N) CT tokens shifted by N,
// 2N the start symbol.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rad2ct/checkpoint.hpp"
#include "rad2ct/config.hpp"
#include "rad2ct/ops.hpp"
#include "rad2ct/vq.hpp"

namespace rad2ct {

/// Flattens width fastest, then height, then depth.
std::vector<TokenId> flatten_tokens(const TokenGrid& g);
TokenGrid unflatten_tokens(std::span<const TokenId> tokens, std::size_t height, std::size_t width, std::size_t depth,
                           Modality modality);

enum class SpanKind { sos, pa, lat, ct };

struct SequenceLayout {
  std::size_t pa = 0;
  std::size_t lat = 0;
  std::size_t ct = 0;

  std::size_t total() const { return 1 + pa + lat + ct; }
  std::size_t pa_begin() const { return 1; }
  std::size_t lat_begin() const { return 1 + pa; }
  std::size_t ct_begin() const { return 1 + pa + lat; }
  SpanKind span_at(std::size_t position) const;
  bool operator==(const SequenceLayout&) const = default;
};

struct TranslationSequence {
  std::vector<TokenId> tokens;
  SequenceLayout layout;
  std::size_t codebook_size = 0;  // N

  TokenId sos() const { return static_cast<TokenId>(2 * codebook_size); }
};

/// Throws UsageError when pa/lat are not radiograph grids or ct is not a CT grid.
TranslationSequence build_sequence(const TokenGrid& pa, const TokenGrid& lat, const TokenGrid& ct,
                                   std::size_t codebook_size);
/// CT span of a full sequence back to a grid of codebook indices in [0, N).
TokenGrid ct_grid(std::span<const TokenId> sequence, const SequenceLayout& layout, std::size_t codebook_size,
                  std::size_t height, std::size_t width, std::size_t depth);

/// Half-open vocabulary range permitted at `position`.
std::pair<TokenId, TokenId> allowed_range(const SequenceLayout& layout, std::size_t position,
                                          std::size_t codebook_size);

struct TranslatorConfig {
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t embed = 64;
  std::size_t context = 97;
  std::size_t codebook_size = 256;
  double dropout = 0.0;

  std::size_t vocab() const { return 2 * codebook_size + 1; }
  TokenId sos() const { return static_cast<TokenId>(2 * codebook_size); }
  void validate() const;
  Config to_config(const std::string& prefix) const;
  static TranslatorConfig from_config(const Config& cfg, const std::string& prefix, TranslatorConfig defaults);
  static TranslatorConfig desk();
  /// 8 blocks, 8 heads, 512 wide, N = 8192, context 4609.
  static TranslatorConfig paper();
};

enum class SamplingStrategy { greedy, top_k };
SamplingStrategy parse_sampling(const std::string& name);

struct SamplingConfig {
  SamplingStrategy strategy = SamplingStrategy::greedy;
  double temperature = 1.0;
  std::size_t top_k = 100;
  std::uint64_t seed = 0;
};

class Translator {
 public:
  Translator(TranslatorConfig cfg, std::uint64_t seed);

  const TranslatorConfig& config() const { return cfg_; }

  /// Logits [T × vocab] for one sequence (no dropout).
  Tensor forward(std::span<const TokenId> tokens) const;
  /// Logits [batch·seq × vocab]; dropout is applied when `train` is set.
  Tensor forward_batch(std::span<const TokenId> tokens, std::size_t batch, std::size_t seq, bool train);
  /// Mean next-token cross-entropy over all T - 1 predicted positions of every sequence.
  Tensor loss(std::span<const TranslationSequence> batch, bool train = false);

  /// Continues `prompt` (starting with SOS) by `count` tokens. Every generated token
  /// is restricted to the vocabulary range of its span in `layout`.
  std::vector<TokenId> generate(std::span<const TokenId> prompt, const SequenceLayout& layout, std::size_t count,
                                const SamplingConfig& sampling) const;
  /// Logits of every position computed one token at a time through the key/value
  /// cache used by generate. Matches forward() exactly.
  std::vector<Real> cached_logits(std::span<const TokenId> tokens) const;

  std::vector<Tensor> parameters();
  Checkpoint to_checkpoint(const std::string& stage, std::uint64_t seed) const;
  static Translator from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor attn_weight, attn_bias;
    Tensor proj_weight, proj_bias;
    Tensor ln2_gain, ln2_bias;
    Tensor ff1_weight, ff1_bias;
    Tensor ff2_weight, ff2_bias;
  };
  struct Cache;

  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  void step(TokenId token, std::size_t position, Cache& cache, std::vector<Real>& logits) const;
  void check_tokens(std::span<const TokenId> tokens) const;

  TranslatorConfig cfg_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  std::vector<Block> blocks_;
  Tensor lnf_gain_, lnf_bias_;
  Tensor head_weight_, head_bias_;
  std::mt19937_64 dropout_rng_;
};

/// One sequence per line, tokens separated by single spaces.
std::string format_tokens(std::span<const TokenId> tokens);
/// Throws ParseError (offset = character position) on anything but integers.
std::vector<TokenId> parse_tokens(const std::string& line);

}  // namespace rad2ct
