#include <doctest.h>

#include <cstring>
#include <random>

#include "helpers.hpp"
#include "vita/checkpoint.hpp"
#include "vita/eval.hpp"

using namespace vita;
using vita::test::random_mask;

namespace {

const std::vector<RoISample>& val_rois() {
  static const auto s = build_roi_samples(vita::test::small_dataset(), Split::val, 64, 20);
  return s;
}

Mask from_pixels(std::initializer_list<std::pair<int, int>> px) {
  Mask m = Mask::Zero(2, 2);
  for (auto [r, c] : px) m(r, c) = 1;
  return m;
}

}  // namespace

TEST_CASE("iou examples") {
  CHECK(iou(from_pixels({{0, 0}, {0, 1}}), from_pixels({{0, 1}, {1, 1}})) == doctest::Approx(1.0 / 3));
  auto a = random_mask(9, 9, 1);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(Mask::Zero(3, 3), Mask::Zero(3, 3)) == 1.0);
  CHECK(iou(Mask::Zero(3, 3), Mask::Ones(3, 3)) == 0.0);
  CHECK(iou(from_pixels({{0, 0}}), from_pixels({{1, 1}})) == 0.0);
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto x = random_mask(6, 7, s, 0.3), y = random_mask(6, 7, s + 100, 0.6);
    CHECK(iou(x, y) == iou(y, x));
  }
  CHECK_THROWS_AS(iou(Mask::Zero(2, 2), Mask::Zero(2, 3)), ContractError);
}

TEST_CASE("threshold_mask") {
  CHECK((threshold_mask(Plane::Constant(3, 3, 0.6f)) == 1).all());
  CHECK((threshold_mask(Plane::Constant(3, 3, 0.4f)) == 0).all());
  CHECK((threshold_mask(Plane::Constant(3, 3, 0.5f), 0.5) == 1).all());
  CHECK((threshold_mask(Plane::Constant(3, 3, 0.5f), 0.7) == 0).all());
}

TEST_CASE("derived visible and occluded predictions") {
  auto amodal = random_mask(8, 8, 2, 0.7);
  auto occ = random_mask(8, 8, 3, 0.3);
  auto mv = random_mask(8, 8, 4, 0.5);

  BinaryPrediction dual{amodal, Mask::Zero(8, 8)};
  CHECK((derive_visible_prediction(dual, mv) == amodal).all());

  BinaryPrediction single{amodal, std::nullopt};
  Mask perfect = (amodal != 0 || mv != 0).cast<std::uint8_t>();
  BinaryPrediction covering{perfect, std::nullopt};
  CHECK((derive_visible_prediction(covering, mv) == mv).all());
  CHECK(iou(derive_visible_prediction(covering, mv), mv) == 1.0);

  dual.occluded = occ;
  bool ok = true;
  for (Index i = 0; i < 64; ++i) {
    const bool a = amodal.data()[i], o = occ.data()[i], v = mv.data()[i];
    ok = ok && derive_visible_prediction(dual, mv).data()[i] == (a && !o);
    ok = ok && derive_visible_prediction(single, mv).data()[i] == (a && v);
    ok = ok && derive_occluded_prediction(dual, mv).data()[i] == o;
    ok = ok && derive_occluded_prediction(single, mv).data()[i] == (a && !v);
  }
  CHECK(ok);
}

TEST_CASE("ground-truth predictions score 1") {
  const auto& rois = val_rois();
  std::vector<BinaryPrediction> preds;
  for (const auto& s : rois) preds.push_back({s.amodal, s.occluded});
  auto r = score_predictions(rois, preds);
  CHECK(r.miou_a == 1.0);
  CHECK(r.miou_v == 1.0);
  CHECK(r.miou_o == 1.0);
  CHECK_THROWS_AS(score_predictions({}, {}), ContractError);
  CHECK_THROWS_AS(score_predictions(rois, std::span(preds).first(1)), ContractError);
}

TEST_CASE("means match a brute-force recomputation") {
  const auto& rois = val_rois();
  REQUIRE(rois.size() == 20);
  std::vector<BinaryPrediction> preds;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    BinaryPrediction p{random_mask(64, 64, 10 + i, 0.4), std::nullopt};
    if (i % 2 == 0) p.occluded = random_mask(64, 64, 50 + i, 0.2);
    preds.push_back(p);
  }
  auto r = score_predictions(rois, preds);

  double sa = 0, sv = 0, so = 0;
  std::array<double, 3> bs{0, 0, 0};
  std::array<std::size_t, 3> bc{0, 0, 0};
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const auto& s = rois[i];
    const auto& p = preds[i];
    auto count_iou = [](auto&& inter_pred, const Mask& gt) {
      Index in = 0, un = 0;
      for (Index k = 0; k < gt.size(); ++k) {
        const bool x = inter_pred(k), y = gt.data()[k] != 0;
        in += x && y;
        un += x || y;
      }
      return un == 0 ? 1.0 : double(in) / double(un);
    };
    const Mask& mv = s.roi.visible;
    const double a = count_iou([&](Index k) { return p.amodal.data()[k] != 0; }, s.amodal);
    const double v = count_iou(
        [&](Index k) {
          return p.amodal.data()[k] != 0 && (p.occluded ? p.occluded->data()[k] == 0 : mv.data()[k] != 0);
        },
        s.visible);
    const double o = count_iou(
        [&](Index k) { return p.occluded ? p.occluded->data()[k] != 0 : (p.amodal.data()[k] != 0 && mv.data()[k] == 0); },
        s.occluded);
    sa += a;
    sv += v;
    so += o;
    const auto b = static_cast<std::size_t>(occlusion_bin(s.occ_rate));
    bs[b] += o;
    bc[b] += 1;
    CHECK(r.instances[i].iou_a == a);
  }
  CHECK(r.miou_a == sa / 20);
  CHECK(r.miou_v == sv / 20);
  CHECK(r.miou_o == so / 20);
  CHECK(r.count_by_bin == bc);
  CHECK(bc[0] + bc[1] + bc[2] == r.n_samples);
  for (std::size_t b = 0; b < 3; ++b) {
    if (bc[b] == 0) {
      CHECK_FALSE(r.miou_o_by_bin[b].has_value());
    } else {
      REQUIRE(r.miou_o_by_bin[b].has_value());
      CHECK(*r.miou_o_by_bin[b] == bs[b] / double(bc[b]));
    }
  }
}

TEST_CASE("evaluate leaves the model untouched and times every sample") {
  AmodalSegmenter<float> m(ModelConfig::toy());
  const auto before = encode_checkpoint(m.config(), m.parameters());
  EvalOptions o;
  auto r = evaluate(m, std::span(val_rois()).first(5), o);
  CHECK(encode_checkpoint(m.config(), m.parameters()) == before);
  CHECK(r.n_samples == 5);
  CHECK(r.t_inf_ms > 0);
  CHECK(r.t_inf_std_ms >= 0);
  CHECK(r.config_fingerprint == m.config().fingerprint());
  CHECK(r.miou_a >= 0);
  CHECK(r.miou_a <= 1);

  auto again = evaluate(m, std::span(val_rois()).first(5), o);
  CHECK(again.miou_a == r.miou_a);
  CHECK(again.miou_o == r.miou_o);
  CHECK_THROWS_AS(evaluate(m, {}, o), ContractError);

  const auto js = r.to_json();
  CHECK(js.find("\"by_occ_bin\"") != std::string::npos);
  CHECK(js.find("\"t_inf_ms\"") != std::string::npos);
}

TEST_CASE("predict_roi matches evaluate") {
  AmodalSegmenter<float> single(ModelConfig::toy(HeadKind::single));
  const auto& s = val_rois()[0];
  auto p = predict_roi(single, s, 0.5);
  CHECK_FALSE(p.occluded.has_value());
  CHECK(p.amodal.rows() == 64);
  auto r = evaluate(single, std::span(&s, 1), EvalOptions{});
  CHECK(r.instances[0].iou_a == iou(p.amodal, s.amodal));
}

TEST_CASE("sweep table") {
  CHECK(sweep_csv({}) == "lambda_o,miou_a,miou_v,miou_o\n");
  CHECK(sweep_csv({{0.25, 0.5, 0.75, 0.125}}) == "lambda_o,miou_a,miou_v,miou_o\n0.25,0.500000,0.750000,0.125000\n");

  const auto train = build_roi_samples(vita::test::small_dataset(), Split::train, 64, 4);
  FitOptions o;
  o.steps = 1;
  o.batch_size = 2;
  auto rows = lambda_sweep([] { return AmodalSegmenter<float>(ModelConfig::toy()); }, train,
                           std::span(val_rois()).first(3), {0.0, 0.25, 0.5}, o);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].lambda_o == 0.0);
  CHECK(rows[2].lambda_o == 0.5);
  CHECK_THROWS_AS(lambda_sweep([] { return AmodalSegmenter<float>(ModelConfig::toy(HeadKind::single)); }, train,
                               std::span(val_rois()).first(3), {0.0}, o),
                  ConfigError);
}
