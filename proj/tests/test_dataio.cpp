#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "vita/dataio.hpp"
#include "vita/eval.hpp"

using namespace vita;
namespace fs = std::filesystem;

namespace {

/// One 100x100 scene holding a single unoccluded square.
SceneSample square_scene(Index x, Index y, Index side) {
  SceneSample s;
  s.scene_id = "s0000";
  s.image = RgbImage(100, 100);
  InstanceRecord r;
  r.amodal = Mask::Zero(100, 100);
  r.amodal.block(y, x, side, side).setOnes();
  r.visible = r.amodal;
  r.occluded = Mask::Zero(100, 100);
  r.bbox = bounding_box(r.visible);
  s.instances.push_back(r);
  return s;
}

Plane to_plane(const Mask& m) { return m.cast<float>(); }

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

TEST_CASE("bbox enlargement") {
  CHECK(enlarge_bbox({10, 10, 20, 20}, 100, 100) == Rect{8, 8, 24, 24});
  CHECK(enlarge_bbox({0, 0, 10, 10}, 100, 100) == Rect{0, 0, 11, 11});
  CHECK(enlarge_bbox({95, 90, 5, 10}, 100, 100) == Rect{94, 89, 6, 11});
  CHECK(enlarge_bbox({3, 7, 1, 1}, 100, 100) == Rect{2, 6, 3, 3});
  for (Index x = 0; x < 90; x += 7) {
    for (Index w = 1; w < 10; ++w) {
      const BBox b{x, 50 - w, w, 2 * w};
      const Rect r = enlarge_bbox(b, 100, 100);
      CHECK(r.contains(b));
      CHECK(r.x >= 0);
      CHECK(r.x + r.w <= 100);
    }
  }
}

TEST_CASE("extract_roi geometry") {
  auto s = square_scene(10, 10, 20);
  auto roi = extract_roi(s, s.instances[0], 64);
  CHECK(roi.crop == Rect{8, 8, 24, 24});
  CHECK(roi.source_bbox == BBox{10, 10, 20, 20});
  CHECK(roi.scale_x == doctest::Approx(24.0 / 64));
  CHECK(roi.image[0].rows() == 64);
  CHECK(roi.visible.rows() == 64);
  CHECK((roi.visible <= 1).all());

  auto corner = square_scene(0, 0, 12);
  auto rc = extract_roi(corner, corner.instances[0], 64);
  CHECK(rc.crop.x == 0);
  CHECK(rc.crop.y == 0);
  CHECK(rc.visible.rows() == 64);
  CHECK(rc.visible.cols() == 64);

  auto hidden = s;
  hidden.instances[0].visible.setZero();
  hidden.instances[0].bbox = {};
  CHECK_THROWS_AS(extract_roi(hidden, hidden.instances[0], 64), ContractError);
}

TEST_CASE("nearest mask resampling stays binary") {
  const auto& d = vita::test::small_dataset();
  for (const auto& r : d.scenes[0].instances) {
    if (r.excluded()) continue;
    auto roi = extract_roi(d.scenes[0], r, 64);
    CHECK(((roi.visible == 0) || (roi.visible == 1)).all());
    CHECK(area(roi.visible) > 0);
  }
}

TEST_CASE("bilinear resize") {
  Plane flat = Plane::Constant(7, 5, 0.25f);
  CHECK((resize_bilinear(flat, 13, 3) == 0.25f).all());
  Plane ramp(1, 4);
  ramp << 0, 1, 2, 3;
  auto up = resize_bilinear(ramp, 8, 1);
  CHECK(up(0, 0) == 0.0f);
  CHECK(up(0, 1) == doctest::Approx(0.25f));
  CHECK(up(0, 2) == doctest::Approx(0.75f));
  CHECK(up(0, 7) == 3.0f);
}

TEST_CASE("paste_back") {
  auto s = square_scene(10, 10, 20);
  auto roi = extract_roi(s, s.instances[0], 48);
  SUBCASE("exact round trip at an integer scale") {
    auto back = paste_back(to_plane(roi.visible), roi, 0.5, 100, 100);
    CHECK((back == s.instances[0].visible).all());
  }
  SUBCASE("all zero and all one") {
    CHECK(area(paste_back(Plane::Zero(48, 48), roi, 0.5, 100, 100)) == 0);
    auto full = paste_back(Plane::Ones(48, 48), roi, 0.5, 100, 100);
    CHECK(area(full) == 24 * 24);
    CHECK(bounding_box(full) == BBox{8, 8, 24, 24});
  }
}

TEST_CASE("paste_back of resampled ground truth") {
  const auto& d = vita::test::small_dataset();
  double worst = 1;
  for (const auto& scene : d.scenes) {
    for (const auto& r : scene.instances) {
      if (r.excluded()) continue;
      auto roi = extract_roi(scene, r, 64);
      auto back = paste_back(to_plane(crop_mask(r.amodal, roi.crop, 64)), roi, 0.5, 128, 128);
      Mask within = Mask::Zero(128, 128);
      within.block(roi.crop.y, roi.crop.x, roi.crop.h, roi.crop.w) =
          r.amodal.block(roi.crop.y, roi.crop.x, roi.crop.h, roi.crop.w);
      worst = std::min(worst, iou(back, within));
    }
  }
  INFO("worst IoU " << worst);
  CHECK(worst >= 0.95);
}

TEST_CASE("batches") {
  const auto rois = build_roi_samples(vita::test::small_dataset(), Split::train, 64, 3);
  REQUIRE(rois.size() == 3);
  const std::vector<std::size_t> idx{2, 0};
  auto x = input_batch(rois, idx);
  CHECK(x.shape() == Shape{2, 4, 64, 64});
  CHECK(x.array().minCoeff() >= -1.0f);
  CHECK(x.array().maxCoeff() <= 1.0f);
  CHECK(tensor_plane(x, 0, 0)(5, 7) == doctest::Approx(2 * rois[2].roi.image[0](5, 7) - 1));
  CHECK((tensor_plane(x, 1, 3) == rois[0].visible.cast<float>()).all());
  CHECK((tensor_plane(amodal_batch(rois, idx), 0) == rois[2].amodal.cast<float>()).all());
  CHECK((tensor_plane(occluded_batch(rois, idx), 1) == rois[0].occluded.cast<float>()).all());
  CHECK_THROWS_AS(input_batch(rois, std::vector<std::size_t>{}), ContractError);
  CHECK_THROWS_AS(input_batch(rois, std::vector<std::size_t>{3}), ContractError);
}

TEST_CASE("dataset write, read, write is byte identical") {
  const auto& d = vita::test::small_dataset();
  const auto a = vita::test::scratch_dir("ds_a");
  const auto b = vita::test::scratch_dir("ds_b");
  write_dataset(d, a);
  const auto back = read_dataset(a);
  write_dataset(back, b);
  const auto fa = files_under(a);
  CHECK(fa == files_under(b));
  for (const auto& f : fa) CHECK(read_file(a / f) == read_file(b / f));

  REQUIRE(back.scenes.size() == d.scenes.size());
  CHECK(back.instance_count() == d.instance_count());
  std::ifstream in(a / "index.jsonl");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == d.instance_count());
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    CHECK(back.scenes[i].image == d.scenes[i].image);
    CHECK(back.scenes[i].split == d.scenes[i].split);
    for (std::size_t k = 0; k < d.scenes[i].instances.size(); ++k) {
      const auto& x = back.scenes[i].instances[k];
      const auto& y = d.scenes[i].instances[k];
      CHECK((x.visible == y.visible).all());
      CHECK((x.amodal == y.amodal).all());
      CHECK((x.occluded == y.occluded).all());
      CHECK(x.occ_rate == y.occ_rate);
    }
  }
}

TEST_CASE("index record layout") {
  const auto& s = vita::test::small_dataset().scenes[0];
  const auto rec = index_record(s, s.instances[0]);
  CHECK(rec.rfind(R"({"scene_id":"s0000","instance_id":0,"split":")", 0) == 0);
  CHECK(rec.find(R"("image":"scenes/s0000.ppm","visible":"masks/s0000_0_v.pgm")") != std::string::npos);
}

TEST_CASE("malformed index lines report line and byte offset") {
  const auto root = vita::test::scratch_dir("ds_bad");
  write_dataset(vita::test::small_dataset(), root);
  const auto bytes = read_file(root / "index.jsonl");
  std::string text(bytes.begin(), bytes.end());
  const auto first_end = text.find('\n');

  write_text(root / "index.jsonl", text.substr(0, first_end + 1) + "{\"scene_id\": oops}\n");
  CHECK_THROWS_WITH_AS(read_dataset(root), doctest::Contains("line 2"), FormatError);
  CHECK_THROWS_WITH_AS(read_dataset(root), doctest::Contains("byte offset"), FormatError);

  write_text(root / "index.jsonl", R"({"scene_id":"s0000"})" "\n");
  CHECK_THROWS_WITH_AS(read_dataset(root), doctest::Contains("missing key"), FormatError);

  std::string swapped = text.substr(0, first_end);
  const auto at = swapped.find("\"bbox\":[");
  swapped.insert(at + 8, "99,");
  write_text(root / "index.jsonl", swapped + "\n");
  CHECK_THROWS_AS(read_dataset(root), FormatError);

  write_text(root / "index.jsonl", "");
  CHECK_THROWS_AS(read_dataset(root), FormatError);
  CHECK_THROWS_AS(read_dataset(root / "missing"), FormatError);
}

TEST_CASE("PNM codecs") {
  Mask m = vita::test::random_mask(5, 7, 1);
  const auto pgm = encode_pgm(m);
  CHECK(std::string(pgm.begin(), pgm.begin() + 2) == "P5");
  CHECK((decode_pgm(pgm, "m.pgm") == m).all());

  RgbImage img(3, 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 11);
  CHECK(decode_ppm(encode_ppm(img), "i.ppm") == img);

  auto bad = pgm;
  bad[1] = '6';
  CHECK_THROWS_WITH_AS(decode_pgm(bad, "m.pgm"), doctest::Contains("byte offset"), FormatError);
  bad = pgm;
  bad.back() = 7;
  CHECK_THROWS_AS(decode_pgm(bad, "m.pgm"), FormatError);
  bad = pgm;
  bad.pop_back();
  CHECK_THROWS_WITH_AS(decode_pgm(bad, "m.pgm"), doctest::Contains("m.pgm"), FormatError);
  auto ppm = encode_ppm(img);
  ppm.resize(ppm.size() - 1);
  CHECK_THROWS_AS(decode_ppm(ppm, "i.ppm"), FormatError);
}
