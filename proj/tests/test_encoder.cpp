// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dimple/encoder.hpp"
#include "dimple/errors.hpp"
#include "test_support.hpp"

namespace dimple {
namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t, std::size_t row0, std::size_t rows) {
  Mat m(rows, std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(row0 + i, j);
  return m;
}

Mat mat_mul(const Mat& a, const Tensor& w) {
  Mat out(a.size(), std::vector<double>(w.cols(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      for (std::size_t t = 0; t < w.rows(); ++t) out[i][j] += a[i][t] * w.at(t, j);
  return out;
}

Mat add_vec(Mat m, const Tensor& b) {
  for (auto& row : m)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b.at(j);
  return m;
}

Mat ln(const Mat& x, const Tensor& g, const Tensor& b) {
  Mat out = x;
  for (auto& row : out) {
    double m = 0.0, v = 0.0;
    for (double e : row) m += e;
    m /= static_cast<double>(row.size());
    for (double e : row) v += (e - m) * (e - m);
    v /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - m) / std::sqrt(v + 1e-5) * g.at(j) + b.at(j);
  }
  return out;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

// Loop-level forward of one sequence through the stack, mirroring the
// documented block structure: pre-norm attention and MLP with residuals.
std::vector<double> reference_forward(const Transformer& net, Mat x, const std::vector<Mat>& prompts,
                                      std::size_t offset, std::size_t readout) {
  const std::size_t d = x.front().size(), heads = net.num_heads, hd = d / heads, n = x.size();
  for (std::size_t layer = 0; layer < net.blocks.size(); ++layer) {
    if (layer < prompts.size())
      for (std::size_t r = 0; r < prompts[layer].size(); ++r) x[offset + r] = prompts[layer][r];
    const auto& b = net.blocks[layer];
    Mat h = ln(x, b.ln1_gain, b.ln1_shift);
    Mat q = mat_mul(h, b.query), k = mat_mul(h, b.key), v = mat_mul(h, b.value);
    Mat att(n, std::vector<double>(d, 0.0));
    for (std::size_t hh = 0; hh < heads; ++hh) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0.0;
          for (std::size_t c = hh * hd; c < (hh + 1) * hd; ++c) dot += q[i][c] * k[j][c];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = hh * hd; c < (hh + 1) * hd; ++c) att[i][c] += s[j] / z * v[j][c];
      }
    }
    Mat o = add_vec(mat_mul(att, b.out.weight), b.out.bias);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) x[i][c] += o[i][c];
    Mat m1 = add_vec(mat_mul(ln(x, b.ln2_gain, b.ln2_shift), b.fc1.weight), b.fc1.bias);
    for (auto& row : m1)
      for (auto& e : row) e = gelu_ref(e);
    Mat m2 = add_vec(mat_mul(m1, b.fc2.weight), b.fc2.bias);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) x[i][c] += m2[i][c];
  }
  Mat r = mat_mul(ln(Mat{x[readout]}, net.final_gain, net.final_shift), net.projection);
  double norm = 0.0;
  for (double e : r[0]) norm += e * e;
  for (double& e : r[0]) e /= std::sqrt(norm);
  return r[0];
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.num_layers = 3;
  c.prompt_depth = 2;
  c.prompt_len = 2;
  c.text_width = c.vision_width = c.embed_width = 8;
  c.num_heads = 2;
  c.num_patch_tokens = 4;
  c.init_std = 0.3;
  return c;
}

struct Fixture {
  EncoderConfig cfg;
  Rng rng{21};
  Tensor class_emb;
  TextEncoder text;
  VisionEncoder vision;
  Tensor images;

  explicit Fixture(EncoderConfig c = small_config()) : cfg(c) {
    class_emb = test::random_tensor({3, cfg.text_width}, rng, 0.5);
    text = make_text_encoder(cfg, class_emb, rng);
    vision = make_vision_encoder(cfg, rng);
    images = test::random_tensor({5, cfg.num_patch_tokens, cfg.vision_width}, rng);
  }

  Mat vision_sequence(std::size_t s) const {
    const std::size_t T = cfg.num_patch_tokens, d = cfg.vision_width, L = cfg.vision_seq_len();
    Mat x(L, std::vector<double>(d, 0.0));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) x[1 + t][c] = images.at((s * T + t) * d + c);
    if (vision.body.positional.numel())
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t c = 0; c < d; ++c) x[t][c] += vision.body.positional.at(t, c);
    for (std::size_t c = 0; c < d; ++c) x[0][c] = vision.cls.at(0, c);
    return x;
  }

  Mat text_sequence(const TokenizedClass& tc) const {
    Mat x;
    for (std::size_t t = 0; t < tc.tokens.size(); ++t) {
      std::vector<double> row(cfg.text_width);
      for (std::size_t c = 0; c < cfg.text_width; ++c)
        row[c] = text.vocab.embeddings.at(static_cast<std::size_t>(tc.tokens[t]), c) +
                 (text.body.positional.numel() ? text.body.positional.at(t, c) : 0.0);
      x.push_back(row);
    }
    return x;
  }
};

std::vector<Mat> as_mats(std::span<const Tensor> prompts) {
  std::vector<Mat> out;
  for (const auto& p : prompts) out.push_back(to_mat(p, 0, p.rows()));
  return out;
}

TEST(Encoder, ImageMatchesLoopReferenceWithPrompts) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  Tensor z = encode_image(f.vision, f.images, bank, f.cfg);
  auto prompts = as_mats(bank.vision_prompts());
  for (std::size_t s = 0; s < 5; ++s) {
    auto ref = reference_forward(f.vision.body, f.vision_sequence(s), prompts, 1 + f.cfg.num_patch_tokens, 0);
    for (std::size_t c = 0; c < ref.size(); ++c) EXPECT_NEAR(z.at(s, c), ref[c], 1e-12);
  }
}

TEST(Encoder, TextMatchesLoopReferenceWithPrompts) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  const std::vector<int> ids = {0, 1, 2};
  Tensor z = encode_text(f.text, ids, bank, f.cfg);
  auto prompts = as_mats(bank.text);
  for (int c : ids) {
    auto tc = tokenize_class(f.text.vocab, static_cast<std::size_t>(c), kStandardTemplate, f.cfg.prompt_len);
    auto ref = reference_forward(f.text.body, f.text_sequence(tc), prompts, 1, tc.tokens.size() - 1);
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(z.at(static_cast<std::size_t>(c), k), ref[k], 1e-12);
  }
}

TEST(Encoder, ZeroPromptLengthIsPlainTransformer) {
  EncoderConfig cfg = small_config();
  cfg.prompt_len = 0;
  cfg.prompt_depth = 1;
  Fixture f(cfg);
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  EXPECT_TRUE(bank.text.empty());
  Tensor zv = encode_image(f.vision, f.images, bank, f.cfg);
  for (std::size_t s = 0; s < 5; ++s) {
    auto ref = reference_forward(f.vision.body, f.vision_sequence(s), {}, 0, 0);
    for (std::size_t c = 0; c < ref.size(); ++c) EXPECT_NEAR(zv.at(s, c), ref[c], 1e-12);
  }
  const std::vector<int> ids = {2};
  Tensor zt = encode_text(f.text, ids, bank, f.cfg);
  auto tc = tokenize_class(f.text.vocab, 2, kStandardTemplate, 0);
  EXPECT_EQ(tc.tokens.size(), 4u + 3u);  // <sos> a photo of a <class> <eos>
  auto ref = reference_forward(f.text.body, f.text_sequence(tc), {}, 0, tc.tokens.size() - 1);
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(zt.at(0, k), ref[k], 1e-12);
}

TEST(Encoder, HandComputedSingleLayerThreeTokens) {
  // One block with identity attention weights, zero MLP, no positional
  // signal; the readout row is worked out by hand below.
  EncoderConfig cfg;
  cfg.num_layers = 1;
  cfg.prompt_depth = 1;
  cfg.prompt_len = 0;
  cfg.text_width = cfg.vision_width = cfg.embed_width = 2;
  cfg.num_heads = 1;
  cfg.num_patch_tokens = 2;
  cfg.positional = false;
  Rng rng(0);
  VisionEncoder enc = make_vision_encoder(cfg, rng);
  auto& b = enc.body.blocks[0];
  b.query = Tensor::identity(2);
  b.key = Tensor::identity(2);
  b.value = Tensor::identity(2);
  b.out = LinearMap::identity(2);
  b.fc1 = LinearMap::zero(2, 4);
  b.fc2 = LinearMap::zero(4, 2);
  enc.body.projection = Tensor::identity(2);
  enc.cls = Tensor({1, 2}, {1.0, 0.0});
  Tensor img({1, 2, 2}, {0.0, 1.0, 2.0, 0.0});
  Tensor z = encode_image(enc, img, std::span<const Tensor>{}, cfg);
  // Layer norm maps every 2-vector (a, b) with a != b to ±(1, -1) scaled by
  // 1/sqrt(1 + eps'), where eps' = 1e-5 / ((a-b)/2)^2.
  auto ln2 = [](double a, double bb) {
    const double m = (a + bb) / 2, v = (a - m) * (a - m);
    return std::pair{(a - m) / std::sqrt(v + 1e-5), (bb - m) / std::sqrt(v + 1e-5)};
  };
  auto [c0, c1] = ln2(1, 0);
  auto [p0, p1] = ln2(0, 1);
  auto [r0, r1] = ln2(2, 0);
  const double s_cc = (c0 * c0 + c1 * c1) / std::sqrt(2.0), s_cp = (c0 * p0 + c1 * p1) / std::sqrt(2.0),
               s_cr = (c0 * r0 + c1 * r1) / std::sqrt(2.0);
  const double e_c = std::exp(s_cc), e_p = std::exp(s_cp), e_r = std::exp(s_cr), zsum = e_c + e_p + e_r;
  const double a0 = (e_c * c0 + e_p * p0 + e_r * r0) / zsum, a1 = (e_c * c1 + e_p * p1 + e_r * r1) / zsum;
  auto [f0, f1] = ln2(1 + a0, 0 + a1);
  const double n = std::hypot(f0, f1);
  EXPECT_NEAR(z.at(0, 0), f0 / n, 1e-12);
  EXPECT_NEAR(z.at(0, 1), f1 / n, 1e-12);
}

TEST(Encoder, OutputsAreUnitNorm) {
  Fixture f;
  for (PromptMode mode : {PromptMode::coupled, PromptMode::independent}) {
    PromptBank bank = make_prompt_bank(mode, f.cfg, f.text.vocab, f.rng);
    const std::vector<int> ids = {0, 1, 2};
    for (const Tensor& z : {encode_image(f.vision, f.images, bank, f.cfg), encode_text(f.text, ids, bank, f.cfg)}) {
      for (std::size_t i = 0; i < z.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < z.cols(); ++j) s += z.at(i, j) * z.at(i, j);
        EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9);
      }
    }
  }
}

TEST(Encoder, DeepPromptsReplaceBlockInputs) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  auto vprompts = bank.vision_prompts();
  const std::size_t L = f.cfg.vision_seq_len(), off = 1 + f.cfg.num_patch_tokens, b = f.cfg.prompt_len;
  std::size_t seen = 0;
  auto check = [&](std::size_t block, const Tensor& x) {
    ++seen;
    if (block > f.cfg.prompt_depth) return;
    for (std::size_t s = 0; s < 5; ++s)
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < f.cfg.vision_width; ++c)
          EXPECT_EQ(x.at(s * L + off + r, c), vprompts[block - 1].at(r, c));
  };
  encode_image(f.vision, f.images, bank, f.cfg, check);
  EXPECT_EQ(seen, f.cfg.num_layers);

  // After the last prompted block, prompt rows carry the block's output.
  Tensor after;
  encode_image(f.vision, f.images, bank, f.cfg, [&](std::size_t block, const Tensor& x) {
    if (block == f.cfg.prompt_depth + 1) after = x;
  });
  EXPECT_NE(after.at(off, 0), vprompts.back().at(0, 0));
}

TEST(Encoder, ZeroCouplingGivesZeroVisionPrompts) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  for (auto& m : bank.coupling) m = LinearMap::zero(f.cfg.text_width, f.cfg.vision_width);
  for (const auto& p : bank.vision_prompts())
    for (double v : p.data()) EXPECT_EQ(v, 0.0);
  Tensor z = encode_image(f.vision, f.images, bank, f.cfg);
  double s = 0.0;
  for (std::size_t j = 0; j < z.cols(); ++j) s += z.at(0, j) * z.at(0, j);
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Encoder, IndependentAndCoupledModesDiffer) {
  Fixture f;
  Rng r1(3), r2(3);
  PromptBank coupled = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, r1);
  PromptBank independent = make_prompt_bank(PromptMode::independent, f.cfg, f.text.vocab, r2);
  EXPECT_TRUE(coupled.vision.empty());
  EXPECT_EQ(independent.vision.size(), f.cfg.prompt_depth);
  Tensor a = encode_image(f.vision, f.images, coupled, f.cfg);
  Tensor b = encode_image(f.vision, f.images, independent, f.cfg);
  EXPECT_NE(test::to_vector(a), test::to_vector(b));
}

TEST(Encoder, PatchPermutationInvarianceWithoutPositions) {
  EncoderConfig cfg = small_config();
  cfg.positional = false;
  Fixture f(cfg);
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  const std::size_t T = cfg.num_patch_tokens, d = cfg.vision_width;
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<double> permuted(f.images.numel());
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) permuted[(s * T + t) * d + c] = f.images.at((s * T + perm[t]) * d + c);
  Tensor a = encode_image(f.vision, f.images, bank, cfg);
  Tensor b = encode_image(f.vision, Tensor(f.images.shape(), permuted), bank, cfg);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-9);
}

TEST(Encoder, CoupledVisionPathReachesTextPrompts) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  Tensor w = test::random_tensor({5, f.cfg.embed_width}, f.rng);
  sum(mul(encode_image(f.vision, f.images, bank, f.cfg), w)).backward();
  for (const auto& p : bank.text) {
    ASSERT_TRUE(p.has_grad());
    double norm = 0.0;
    for (double g : p.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0);
  }
}

TEST(Encoder, ErrorsOnBadShapes) {
  EncoderConfig cfg = small_config();
  cfg.prompt_depth = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  Rng rng(1);
  EXPECT_THROW(encode_image(f.vision, test::random_tensor({2, 5, 8}, rng), bank, f.cfg), DimensionError);
  EXPECT_THROW(encode_text_early(f.text, std::vector<int>{0}, bank, f.cfg), ConfigError);
}

TEST(Tokenizer, ConstantLengthAndUniqueClassTokens) {
  Fixture f;
  std::set<int> class_tokens;
  std::size_t len = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    auto tc = tokenize_class(f.text.vocab, c, kStandardTemplate, 2);
    if (c == 0) len = tc.tokens.size();
    EXPECT_EQ(tc.tokens.size(), len);
    class_tokens.insert(tc.tokens[tc.tokens.size() - 2]);
  }
  EXPECT_EQ(class_tokens.size(), 3u);
  // Short templates are padded so that every prompt slot exists.
  EXPECT_EQ(tokenize_class(f.text.vocab, 0, "a", 3).tokens.size(), 3u + 3u);
}

TEST(Encoder, FirstTextPromptsStartFromTemplateWords) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, f.rng);
  auto words = split_words(kStandardTemplate);
  for (std::size_t r = 0; r < f.cfg.prompt_len; ++r)
    for (std::size_t c = 0; c < f.cfg.text_width; ++c)
      EXPECT_EQ(bank.text[0].at(r, c), f.text.vocab.embeddings.at(static_cast<std::size_t>(f.text.vocab.id(words[r])), c));
}

TEST(EarlyEncoder, IdenticalBanksGiveIdenticalEncodings) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::early, f.cfg, f.text.vocab, f.rng);
  bank.spurious_template = bank.invariant_template;
  bank.text_spurious = bank.text_invariant;
  bank.to_vision_spurious = bank.to_vision_invariant;
  const std::vector<int> ids = {0, 1, 2};
  auto [tu, ts] = encode_text_early(f.text, ids, bank, f.cfg);
  auto [vu, vs] = encode_image_early(f.vision, f.images, bank, f.cfg);
  EXPECT_EQ(test::to_vector(tu), test::to_vector(ts));
  EXPECT_EQ(test::to_vector(vu), test::to_vector(vs));
}

TEST(EarlyEncoder, UnitNormAndDistinctFromLate) {
  Fixture f;
  Rng r1(4), r2(4);
  PromptBank early = make_prompt_bank(PromptMode::early, f.cfg, f.text.vocab, r1);
  PromptBank late = make_prompt_bank(PromptMode::coupled, f.cfg, f.text.vocab, r2);
  const std::vector<int> ids = {0, 1, 2};
  auto [tu, ts] = encode_text_early(f.text, ids, early, f.cfg);
  Tensor t = encode_text(f.text, ids, late, f.cfg);
  EXPECT_NE(test::to_vector(tu), test::to_vector(t));
  for (const Tensor& z : {tu, ts}) {
    for (std::size_t i = 0; i < z.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < z.cols(); ++j) s += z.at(i, j) * z.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(EarlyEncoder, ProjectionGradientMatchesFiniteDifferences) {
  Fixture f;
  PromptBank bank = make_prompt_bank(PromptMode::early, f.cfg, f.text.vocab, f.rng);
  Tensor w = test::random_tensor({5, f.cfg.embed_width}, f.rng);
  auto loss = [&] {
    auto [vu, vs] = encode_image_early(f.vision, f.images, bank, f.cfg);
    return sum(mul(add(vu, scale(vs, 0.5)), w));
  };
  EXPECT_LT(test::grad_check(loss, {bank.to_vision_invariant.weight, bank.to_vision_invariant.bias}), 1e-4);
}

}  // namespace
}  // namespace dimple
