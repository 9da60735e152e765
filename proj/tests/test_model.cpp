#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "rejepa/errors.hpp"
#include "rejepa/model.hpp"
#include "rejepa/training.hpp"

using namespace rejepa;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder = {16, 2, 2, 4, 2.0, 2};
  c.predictor = {8, 2, 2, 2.0};
  c.image_height = 16;
  c.image_width = 12;
  return c;
}

ImageTensor random_image(int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  ImageTensor img(c, h, w);
  for (auto& v : img.values) v = n(rng);
  return img;
}

// Nudges every parameter away from its initial value so that tests do not
// depend on symmetric initial states.
void perturb(const ParamList& params, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (Param* p : params)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += n(rng);
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.encoder.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.encoder.depth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.image_width = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.predictor.embed_dim = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("a stack without blocks or final norm is patch projection plus position") {
  EncoderConfig ec{16, 0, 2, 4, 2.0, 2, false};
  Rng rng(1);
  const VitEncoder enc("bare", ec, rng);
  const ImageTensor img = random_image(2, 8, 8, 2);
  const PatchSequence p = patchify(img, 4);
  const Matrix pos = sincos_2d_embedding({2, 2}, 16);
  const TokenEmbeddings out = encode_context(enc, pos, p, {0, 1, 2, 3});
  const Matrix expected = enc.patch_embed.forward(p.tokens) + pos;
  CHECK(out.vectors == expected);
}

TEST_CASE("context encoding follows its index set") {
  ModelState m(tiny_config(), 3);
  const PatchSequence p = patchify(random_image(2, 16, 12, 4), 4);
  const TokenEmbeddings a = encode_context(m.context_encoder, m.pos_embed, p, {1, 5, 7, 10});
  const TokenEmbeddings b = encode_context(m.context_encoder, m.pos_embed, p, {7, 1, 10, 5});
  CHECK(b.index_map == std::vector<int>{7, 1, 10, 5});
  const int order[4] = {2, 0, 3, 1};
  for (int r = 0; r < 4; ++r) CHECK((b.vectors.row(r) - a.vectors.row(order[r])).cwiseAbs().maxCoeff() <= 1e-12);
  const TokenEmbeddings again = encode_context(m.context_encoder, m.pos_embed, p, {1, 5, 7, 10});
  CHECK(again.vectors == a.vectors);
  CHECK_THROWS_AS(encode_context(m.context_encoder, m.pos_embed, p, {}), ContractViolation);
  CHECK_THROWS_AS(encode_context(m.context_encoder, m.pos_embed, p, {12}), ContractViolation);
}

TEST_CASE("masked tokens never influence the context encoding") {
  ModelState m(tiny_config(), 5);
  ImageTensor img = random_image(2, 16, 12, 6);
  const std::vector<int> ctx{0, 2, 3, 8};
  const TokenEmbeddings before = encode_context(m.context_encoder, m.pos_embed, patchify(img, 4), ctx);
  // Token 1 covers rows 0..3, columns 4..7.
  img.at(0, 1, 5) += 10.0f;
  const TokenEmbeddings after = encode_context(m.context_encoder, m.pos_embed, patchify(img, 4), ctx);
  CHECK(before.vectors == after.vectors);
}

TEST_CASE("target and context encoders agree at initialization") {
  ModelState m(tiny_config(), 7);
  const PatchSequence p = patchify(random_image(2, 16, 12, 8), 4);
  const TokenEmbeddings t = encode_target(m.target_encoder, m.pos_embed, p);
  std::vector<int> all(12);
  for (int i = 0; i < 12; ++i) all[i] = i;
  const TokenEmbeddings c = encode_context(m.context_encoder, m.pos_embed, p, all);
  CHECK(t.vectors == c.vectors);
  const TokenEmbeddings sel = select_tokens(t, {3, 7});
  CHECK(sel.index_map == std::vector<int>{3, 7});
  CHECK(sel.vectors.row(1) == t.vectors.row(7));
}

TEST_CASE("target parameters are named apart and excluded from the trainable set") {
  ModelState m(tiny_config(), 9);
  for (Param* p : m.target_params()) CHECK(p->name.rfind("target.", 0) == 0);
  for (Param* p : m.trainable_params()) CHECK(p->name.rfind("target.", 0) != 0);
  int tokens = 0;
  for (Param* p : m.trainable_params()) tokens += p->name == "mask_token";
  CHECK(tokens == 1);
  CHECK(m.mask_token.value.cols() == 8);
  CHECK_FALSE(m.mask_token.decay);
}

TEST_CASE("predictions have one set per group with matching shapes") {
  ModelState m(tiny_config(), 11);
  const PatchSequence p = patchify(random_image(2, 16, 12, 12), 4);
  const TokenEmbeddings ctx = encode_context(m.context_encoder, m.pos_embed, p, {0, 1, 2, 3, 4, 5});
  const auto preds = predict_targets(m.predictor, m.mask_token, m.predictor_pos_embed, ctx, {{6, 7}, {8}, {9, 10, 11}});
  REQUIRE(preds.size() == 3);
  CHECK(preds[0].vectors.rows() == 2);
  CHECK(preds[1].vectors.rows() == 1);
  CHECK(preds[2].vectors.rows() == 3);
  for (const auto& pr : preds) CHECK(pr.vectors.cols() == 16);
  const auto twice = predict_targets(m.predictor, m.mask_token, m.predictor_pos_embed, ctx, {{6, 7}, {6, 7}});
  CHECK(twice[0].vectors == twice[1].vectors);
  CHECK_THROWS_AS(predict_targets(m.predictor, m.mask_token, m.predictor_pos_embed, ctx, {{12}}), ContractViolation);
  CHECK_THROWS_AS(predict_targets(m.predictor, m.mask_token, m.predictor_pos_embed, ctx, {{}}), ContractViolation);
}

TEST_CASE("swapping two mask-token positions swaps their predictions") {
  ModelState m(tiny_config(), 13);
  perturb(m.trainable_params(), 14, 0.1);
  const PatchSequence p = patchify(random_image(2, 16, 12, 15), 4);
  const TokenEmbeddings ctx = encode_context(m.context_encoder, m.pos_embed, p, {0, 1, 2, 3, 4, 5, 6});
  const auto ab = predict_targets(m.predictor, m.mask_token, m.predictor_pos_embed, ctx, {{8, 11}})[0];
  const auto ba = predict_targets(m.predictor, m.mask_token, m.predictor_pos_embed, ctx, {{11, 8}})[0];
  CHECK((ab.vectors.row(0) - ba.vectors.row(1)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((ab.vectors.row(1) - ba.vectors.row(0)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((ab.vectors.row(0) - ab.vectors.row(1)).norm() > 1e-6);
}

TEST_CASE("ema update algebra") {
  Param t("t", Matrix::Constant(1, 1, 2.0), true), c("c", Matrix::Constant(1, 1, 1.0), true);
  ema_update(ParamList{&t}, ParamList{&c}, 0.996);
  CHECK(std::abs(t.value(0, 0) - 1.996) <= 1e-12);

  ModelState m(tiny_config(), 17);
  perturb(m.context_params(), 18, 0.05);
  const ParamList target = m.target_params(), context = m.context_params();
  std::vector<Matrix> t0;
  for (Param* p : target) t0.push_back(p->value);
  ema_update(target, context, 1.0);
  for (std::size_t i = 0; i < target.size(); ++i) CHECK(target[i]->value == t0[i]);

  const double mom = 0.9;
  const int k = 7;
  for (int s = 0; s < k; ++s) ema_update(target, context, mom);
  for (std::size_t i = 0; i < target.size(); ++i) {
    const Matrix closed = std::pow(mom, k) * t0[i] + (1.0 - std::pow(mom, k)) * context[i]->value;
    CHECK((target[i]->value - closed).cwiseAbs().maxCoeff() <= 1e-12);
  }
  ema_update(target, context, 0.0);
  for (std::size_t i = 0; i < target.size(); ++i) CHECK(target[i]->value == context[i]->value);

  CHECK_THROWS_AS(ema_update(target, context, 1.5), ContractViolation);
  Param wrong("w", Matrix::Zero(2, 2), true);
  CHECK_THROWS_AS(ema_update(ParamList{&t}, ParamList{&wrong}, 0.5), ContractViolation);
}

TEST_CASE("pooled embedding is the mean of the full-sequence token embeddings") {
  ModelState m(tiny_config(), 19);
  perturb(m.target_params(), 20, 0.05);
  const ImageTensor img = random_image(2, 16, 12, 21);
  const Vector pooled = pooled_embedding(m, img, EncoderSide::target);
  const auto tokens = encode_target(m.target_encoder, m.pos_embed, patchify(img, 4));
  const auto oracle_mean = oracle::kahan_row_mean(tokens.vectors);
  for (int j = 0; j < pooled.size(); ++j) CHECK(std::abs(pooled(j) - oracle_mean[std::size_t(j)]) <= 1e-12);

  const Vector ctx_side = pooled_embedding(m, img, EncoderSide::context);
  CHECK((ctx_side - pooled).norm() > 1e-6);

  Matrix one(1, 3);
  one << 1, 2, 3;
  CHECK(mean_rows(one) == one.row(0).transpose());
  Matrix dup(2, 3);
  dup << 1, 2, 3, 1, 2, 3;
  CHECK(mean_rows(dup) == one.row(0).transpose());
}

TEST_CASE("batched pooling agrees with per-image pooling") {
  ModelState m(tiny_config(), 22);
  perturb(m.target_params(), 23, 0.05);
  std::vector<ImageTensor> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(random_image(2, 16, 12, 30 + i));
  std::vector<const ImageTensor*> ptrs;
  for (const auto& i : imgs) ptrs.push_back(&i);
  const Matrix batched = pooled_embeddings(m, ptrs, EncoderSide::target, 2);
  for (int i = 0; i < 5; ++i) {
    const Vector single = pooled_embedding(m, imgs[i], EncoderSide::target);
    CHECK((batched.row(i).transpose() - single).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("gradients through encoder and predictor match central differences") {
  ModelConfig cfg = tiny_config();
  ModelState m(cfg, 24);
  perturb(m.trainable_params(), 25, 0.05);
  perturb(m.target_params(), 26, 0.05);
  std::vector<PatchSequence> patches;
  std::vector<MaskPair> masks;
  MaskConfig mc;
  mc.target_ratio = 0.34;
  mc.n_target_groups = 2;
  for (int b = 0; b < 4; ++b) {
    patches.push_back(patchify(random_image(2, 16, 12, 40 + b), 4));
    Rng rng = mask_stream(1, 0, b);
    masks.push_back(sample_random_disjoint(12, mc, rng));
  }
  VicregConfig vc;
  vc.gamma = 2.0;  // keep the variance hinge active
  forward_backward(m, patches, masks, vc, true);
  ParamList params = m.trainable_params();
  std::vector<Matrix> grads;
  for (Param* p : params) grads.push_back(p->grad);
  for (Param* p : m.target_params()) CHECK(p->grad.isZero(0.0));

  std::mt19937_64 rng(27);
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t pi = rng() % params.size();
    Param* p = params[pi];
    const Eigen::Index ei = Eigen::Index(rng() % std::uint64_t(p->value.size()));
    const double numeric = oracle::central_difference(
        [&] { return forward_backward(m, patches, masks, vc, false).total; }, p->value.data()[ei], 1e-5);
    const double analytic = grads[pi].data()[ei];
    INFO(p->name << "[" << ei << "] numeric " << numeric << " analytic " << analytic);
    CHECK(oracle::relative_error(numeric, analytic) <= 1e-4);
    ++checked;
  }
  CHECK(checked >= 50);
}

TEST_CASE("the loss depends on target parameters that receive no gradient") {
  ModelState m(tiny_config(), 28);
  std::vector<PatchSequence> patches;
  std::vector<MaskPair> masks;
  for (int b = 0; b < 3; ++b) {
    patches.push_back(patchify(random_image(2, 16, 12, 50 + b), 4));
    Rng rng = mask_stream(2, 0, b);
    masks.push_back(sample_random_disjoint(12, MaskConfig{}, rng));
  }
  const double base = forward_backward(m, patches, masks, VicregConfig{}, true).total;
  Param* t = m.target_params()[0];
  CHECK(t->grad.isZero(0.0));
  t->value(0, 0) += 0.5;
  CHECK(forward_backward(m, patches, masks, VicregConfig{}, false).total != base);
}
