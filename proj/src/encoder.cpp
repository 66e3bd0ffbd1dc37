// SPDX-License-Identifier: Apache-2.0
#include "dimple/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dimple/errors.hpp"
#include "dimple/ops.hpp"

namespace dimple {

namespace {

constexpr const char* kSos = "<sos>";
constexpr const char* kEos = "<eos>";
constexpr const char* kPad = "X";

std::size_t template_slots(std::string_view template_text, std::size_t prompt_len) {
  return std::max(split_words(template_text).size(), prompt_len);
}

std::size_t max_text_len(std::size_t prompt_len) {
  std::size_t slots = 0;
  for (auto t : {kStandardTemplate, kInvariantTemplate, kSpuriousTemplate})
    slots = std::max(slots, template_slots(t, prompt_len));
  return slots + 3;
}

Tensor ones_param(std::size_t n) { return Tensor::ones({n}, true); }
Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }

TransformerBlock make_block(std::size_t d, const EncoderConfig& cfg, Rng& rng) {
  const double sd = cfg.init_std;
  const std::size_t hidden = d * cfg.mlp_ratio;
  TransformerBlock b;
  b.ln1_gain = ones_param(d);
  b.ln1_shift = zeros_param(d);
  b.query = gaussian_parameter({d, d}, sd, rng);
  b.key = gaussian_parameter({d, d}, sd, rng);
  b.value = near_identity_parameter(d, sd, rng);
  b.out = {near_identity_parameter(d, sd, rng), zeros_param(d)};
  b.ln2_gain = ones_param(d);
  b.ln2_shift = zeros_param(d);
  b.fc1 = LinearMap::gaussian(d, hidden, sd, rng);
  b.fc2 = LinearMap::gaussian(hidden, d, sd, rng);
  return b;
}

Tensor block_forward(const TransformerBlock& b, const Tensor& x, std::size_t seq_len, std::size_t heads) {
  Tensor h = layer_norm(x, b.ln1_gain, b.ln1_shift);
  Tensor att = multi_head_attention(matmul(h, b.query), matmul(h, b.key), matmul(h, b.value), seq_len, heads);
  Tensor y = x + b.out(att);
  Tensor h2 = layer_norm(y, b.ln2_gain, b.ln2_shift);
  return y + b.fc2(gelu(b.fc1(h2)));
}

std::vector<Tensor> vision_from_text(std::span<const Tensor> text, const LinearMap& map) {
  std::vector<Tensor> out;
  out.reserve(text.size());
  for (const auto& p : text) out.push_back(map(p));
  return out;
}

void require_early(const PromptBank& bank, const char* op) {
  if (bank.mode != PromptMode::early) throw ConfigError(std::string(op) + " requires a prompt bank in early mode");
}

}  // namespace

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("encoder: " + msg); };
  if (num_layers == 0) fail("num_layers must be at least 1");
  if (prompt_depth == 0) fail("prompt_depth must be at least 1");
  if (prompt_depth > num_layers) {
    fail("prompt_depth " + std::to_string(prompt_depth) + " exceeds num_layers " + std::to_string(num_layers));
  }
  if (text_width == 0 || vision_width == 0 || embed_width == 0) fail("widths must be positive");
  if (num_heads == 0 || text_width % num_heads != 0 || vision_width % num_heads != 0) {
    fail("text_width and vision_width must be divisible by num_heads");
  }
  if (num_patch_tokens == 0) fail("num_patch_tokens must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) fail("temperature must be positive");
  if (!(init_std >= 0.0)) fail("init_std must be non-negative");
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

int Vocabulary::id(std::string_view word) const {
  for (std::size_t i = 0; i < first_class_token; ++i)
    if (words[i] == word) return static_cast<int>(i);
  throw ConfigError("vocabulary has no word '" + std::string(word) + "'");
}

int Vocabulary::class_token(std::size_t class_id) const {
  if (class_id >= num_classes) {
    throw ConfigError("class " + std::to_string(class_id) + " outside vocabulary of " + std::to_string(num_classes) +
                      " classes");
  }
  return static_cast<int>(first_class_token + class_id);
}

Vocabulary make_vocabulary(const Tensor& class_embeddings, Rng& rng) {
  if (class_embeddings.dim() != 2) throw DimensionError("class embeddings must be a matrix");
  Vocabulary v;
  v.words = {kSos, kEos, kPad};
  for (auto t : {kStandardTemplate, kInvariantTemplate, kSpuriousTemplate}) {
    for (auto& w : split_words(t))
      if (std::find(v.words.begin(), v.words.end(), w) == v.words.end()) v.words.push_back(w);
  }
  v.first_class_token = v.words.size();
  v.num_classes = class_embeddings.rows();
  for (std::size_t c = 0; c < v.num_classes; ++c) v.words.push_back("<class_" + std::to_string(c) + ">");

  const std::size_t d = class_embeddings.cols();
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> table(v.words.size() * d);
  for (std::size_t i = 0; i < v.first_class_token * d; ++i) table[i] = sd * rng.normal();
  std::copy(class_embeddings.data().begin(), class_embeddings.data().end(), table.begin() + v.first_class_token * d);
  v.embeddings = Tensor({v.words.size(), d}, std::move(table));
  return v;
}

TokenizedClass tokenize_class(const Vocabulary& vocab, std::size_t class_id, std::string_view template_text,
                              std::size_t prompt_len) {
  TokenizedClass tc;
  tc.class_id = static_cast<int>(class_id);
  tc.tokens.push_back(vocab.id(kSos));
  auto words = split_words(template_text);
  while (words.size() < prompt_len) words.emplace_back(kPad);
  for (auto& w : words) tc.tokens.push_back(vocab.id(w));
  tc.tokens.push_back(vocab.class_token(class_id));
  tc.tokens.push_back(vocab.id(kEos));
  return tc;
}

std::vector<TokenizedClass> tokenize_classes(const Vocabulary& vocab, std::span<const int> class_ids,
                                             std::string_view template_text, std::size_t prompt_len) {
  std::vector<TokenizedClass> out;
  out.reserve(class_ids.size());
  for (int c : class_ids) {
    if (c < 0) throw ConfigError("negative class id");
    out.push_back(tokenize_class(vocab, static_cast<std::size_t>(c), template_text, prompt_len));
  }
  return out;
}

Transformer make_transformer(std::size_t width, std::size_t max_seq_len, const EncoderConfig& cfg, Rng& rng) {
  Transformer t;
  t.num_heads = cfg.num_heads;
  for (std::size_t i = 0; i < cfg.num_layers; ++i) t.blocks.push_back(make_block(width, cfg, rng));
  if (cfg.positional) t.positional = gaussian_parameter({max_seq_len, width}, cfg.init_std, rng);
  t.final_gain = ones_param(width);
  t.final_shift = zeros_param(width);
  if (width == cfg.embed_width) {
    t.projection = near_identity_parameter(width, cfg.init_std, rng);
  } else {
    t.projection = gaussian_parameter({width, cfg.embed_width}, 1.0 / std::sqrt(static_cast<double>(width)), rng);
  }
  return t;
}

Tensor run_transformer(const Transformer& net, Tensor x, std::size_t seq_len, std::span<const Tensor> prompts,
                       std::size_t prompt_offset, std::size_t readout, const LayerObserver& observer) {
  if (prompts.size() > net.blocks.size()) {
    throw ConfigError("prompt depth " + std::to_string(prompts.size()) + " exceeds " +
                      std::to_string(net.blocks.size()) + " layers");
  }
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    if (i < prompts.size()) x = inject_rows(x, prompts[i], seq_len, prompt_offset);
    if (observer) observer(i + 1, x);
    x = block_forward(net.blocks[i], x, seq_len, net.num_heads);
  }
  const std::size_t num_seq = x.rows() / seq_len;
  std::vector<int> rows(num_seq);
  for (std::size_t s = 0; s < num_seq; ++s) rows[s] = static_cast<int>(s * seq_len + readout);
  Tensor out = layer_norm(gather_rows(x, rows), net.final_gain, net.final_shift);
  return normalize_rows(matmul(out, net.projection));
}

TextEncoder make_text_encoder(const EncoderConfig& cfg, const Tensor& class_embeddings, Rng& rng) {
  cfg.validate();
  if (class_embeddings.dim() != 2 || class_embeddings.cols() != cfg.text_width) {
    throw DimensionError("class embeddings " + shape_to_string(class_embeddings.shape()) + " do not match text width " +
                         std::to_string(cfg.text_width));
  }
  TextEncoder enc;
  enc.vocab = make_vocabulary(class_embeddings, rng);
  enc.body = make_transformer(cfg.text_width, max_text_len(cfg.prompt_len), cfg, rng);
  return enc;
}

VisionEncoder make_vision_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  VisionEncoder enc;
  enc.body = make_transformer(cfg.vision_width, cfg.vision_seq_len(), cfg, rng);
  enc.cls = gaussian_parameter({1, cfg.vision_width}, cfg.init_std, rng);
  return enc;
}

std::string to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::coupled: return "coupled";
    case PromptMode::independent: return "independent";
    case PromptMode::early: return "early";
  }
  return "unknown";
}

PromptMode parse_prompt_mode(std::string_view name) {
  if (name == "coupled") return PromptMode::coupled;
  if (name == "independent") return PromptMode::independent;
  if (name == "early") return PromptMode::early;
  throw ConfigError("unknown prompt mode '" + std::string(name) + "' (expected coupled, independent or early)");
}

std::vector<Tensor> PromptBank::vision_prompts() const {
  switch (mode) {
    case PromptMode::independent: return vision;
    case PromptMode::coupled: {
      std::vector<Tensor> out;
      out.reserve(text.size());
      for (std::size_t i = 0; i < text.size(); ++i) out.push_back(coupling[i](text[i]));
      return out;
    }
    case PromptMode::early: break;
  }
  throw ConfigError("vision_prompts: early-mode banks hold two prompt sets; use encode_image_early");
}

PromptBank make_prompt_bank(PromptMode mode, const EncoderConfig& cfg, const Vocabulary& vocab, Rng& rng) {
  cfg.validate();
  PromptBank bank;
  bank.mode = mode;
  const std::size_t b = cfg.prompt_len, J = cfg.prompt_depth, dl = cfg.text_width, dv = cfg.vision_width;
  const double sd = cfg.init_std;

  // Layer-1 text prompts start from the template's leading word embeddings.
  auto text_stack = [&](std::string_view template_text) {
    std::vector<Tensor> stack;
    if (b == 0) return stack;
    TokenizedClass tc = tokenize_class(vocab, 0, template_text, b);
    std::vector<int> ids(tc.tokens.begin() + 1, tc.tokens.begin() + 1 + static_cast<long>(b));
    Tensor first;
    {
      NoGradGuard guard;
      first = gather_rows(vocab.embeddings, ids);
    }
    stack.push_back(parameter(first));
    for (std::size_t i = 1; i < J; ++i) stack.push_back(gaussian_parameter({b, dl}, sd, rng));
    return stack;
  };

  if (mode == PromptMode::early) {
    bank.text_invariant = text_stack(bank.invariant_template);
    bank.text_spurious = text_stack(bank.spurious_template);
    bank.to_vision_invariant = LinearMap::gaussian(dl, dv, sd, rng);
    bank.to_vision_spurious = LinearMap::gaussian(dl, dv, sd, rng);
    return bank;
  }
  bank.text = text_stack(bank.template_text);
  if (b == 0) return bank;
  if (mode == PromptMode::coupled) {
    for (std::size_t i = 0; i < J; ++i) bank.coupling.push_back(LinearMap::gaussian(dl, dv, sd, rng));
  } else {
    for (std::size_t i = 0; i < J; ++i) bank.vision.push_back(gaussian_parameter({b, dv}, sd, rng));
  }
  return bank;
}

Tensor encode_text(const TextEncoder& enc, std::span<const TokenizedClass> classes, std::span<const Tensor> prompts,
                   const EncoderConfig& cfg, const LayerObserver& observer) {
  if (classes.empty()) throw DimensionError("encode_text: no classes");
  const std::size_t seq_len = classes.front().tokens.size();
  std::vector<int> ids;
  ids.reserve(classes.size() * seq_len);
  for (const auto& c : classes) {
    if (c.tokens.size() != seq_len) throw DimensionError("encode_text: token sequences differ in length");
    ids.insert(ids.end(), c.tokens.begin(), c.tokens.end());
  }
  Tensor x = gather_rows(enc.vocab.embeddings, ids);
  if (enc.body.positional.numel() > 0) {
    if (seq_len > enc.body.positional.rows()) {
      throw DimensionError("encode_text: sequence of " + std::to_string(seq_len) + " tokens exceeds positional table");
    }
    x = x + tile_rows(slice_rows(enc.body.positional, 0, seq_len), classes.size());
  }
  return run_transformer(enc.body, x, seq_len, prompts.first(std::min(prompts.size(), cfg.prompt_depth)), 1,
                         seq_len - 1, observer);
}

Tensor encode_text(const TextEncoder& enc, std::span<const int> class_ids, const PromptBank& bank,
                   const EncoderConfig& cfg, const LayerObserver& observer) {
  if (bank.mode == PromptMode::early) throw ConfigError("encode_text: early-mode bank; use encode_text_early");
  auto classes = tokenize_classes(enc.vocab, class_ids, bank.template_text, cfg.prompt_len);
  return encode_text(enc, classes, bank.text, cfg, observer);
}

Tensor encode_image(const VisionEncoder& enc, const Tensor& images, std::span<const Tensor> prompts,
                    const EncoderConfig& cfg, const LayerObserver& observer) {
  const std::size_t T = cfg.num_patch_tokens, d = cfg.vision_width;
  if (images.dim() != 3 || images.shape()[1] != T || images.shape()[2] != d) {
    throw DimensionError("encode_image: expected images [N × " + std::to_string(T) + " × " + std::to_string(d) +
                         "], got " + shape_to_string(images.shape()));
  }
  const std::size_t n = images.shape()[0], seq_len = cfg.vision_seq_len();
  // Patch rows sit at positions 1..T; class and prompt rows are injected below.
  std::vector<double> seq(n * seq_len * d, 0.0);
  auto src = images.data();
  for (std::size_t s = 0; s < n; ++s)
    std::copy(src.begin() + static_cast<long>(s * T * d), src.begin() + static_cast<long>((s + 1) * T * d),
              seq.begin() + static_cast<long>((s * seq_len + 1) * d));
  Tensor x({n * seq_len, d}, std::move(seq));
  if (enc.body.positional.numel() > 0) x = x + tile_rows(enc.body.positional, n);
  x = inject_rows(x, enc.cls, seq_len, 0);
  return run_transformer(enc.body, x, seq_len, prompts.first(std::min(prompts.size(), cfg.prompt_depth)), 1 + T, 0,
                         observer);
}

Tensor encode_image(const VisionEncoder& enc, const Tensor& images, const PromptBank& bank, const EncoderConfig& cfg,
                    const LayerObserver& observer) {
  if (bank.mode == PromptMode::coupled && bank.coupling.size() != bank.text.size()) {
    throw ConfigError("encode_image: coupled bank is missing coupling maps");
  }
  auto prompts = bank.vision_prompts();
  return encode_image(enc, images, prompts, cfg, observer);
}

std::pair<Tensor, Tensor> encode_text_early(const TextEncoder& enc, std::span<const int> class_ids,
                                            const PromptBank& bank, const EncoderConfig& cfg) {
  require_early(bank, "encode_text_early");
  auto inv = tokenize_classes(enc.vocab, class_ids, bank.invariant_template, cfg.prompt_len);
  auto spu = tokenize_classes(enc.vocab, class_ids, bank.spurious_template, cfg.prompt_len);
  return {encode_text(enc, inv, bank.text_invariant, cfg), encode_text(enc, spu, bank.text_spurious, cfg)};
}

std::pair<Tensor, Tensor> encode_image_early(const VisionEncoder& enc, const Tensor& images, const PromptBank& bank,
                                             const EncoderConfig& cfg) {
  require_early(bank, "encode_image_early");
  auto inv = vision_from_text(bank.text_invariant, bank.to_vision_invariant);
  auto spu = vision_from_text(bank.text_spurious, bank.to_vision_spurious);
  return {encode_image(enc, images, inv, cfg), encode_image(enc, images, spu, cfg)};
}

}  // namespace dimple
