#include <doctest.h>

#include <cstring>
#include <fstream>
#include <set>

#include "mkd/data_synth.hpp"
#include "mkd/errors.hpp"
#include "test_util.hpp"

using namespace mkd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Dataset small_dataset(Modality m = Modality::target, int count = 3) {
  return synthesize_dataset(default_phantom_spec(ModalityStyle::A, 16, 4, 5), count, 10, m);
}

}  // namespace

TEST_CASE("synthesis is deterministic") {
  const PhantomSpec spec = default_phantom_spec(ModalityStyle::A, 32, 4, 3);
  CHECK(synthesize_sample(spec, 7) == synthesize_sample(spec, 7));
  CHECK_FALSE(synthesize_sample(spec, 7) == synthesize_sample(spec, 8));
}

TEST_CASE("geometry is shared across styles while appearance differs") {
  for (std::uint64_t g : {0ULL, 1ULL, 99ULL}) {
    for (std::uint64_t s : {0ULL, 7ULL, 12345ULL}) {
      const LabeledSample a = synthesize_sample(default_phantom_spec(ModalityStyle::A, 32, 4, g), s);
      const LabeledSample b = synthesize_sample(default_phantom_spec(ModalityStyle::B, 32, 4, g), s);
      CHECK(a.label == b.label);
      CHECK_FALSE(a.image == b.image);
    }
  }
  const PhantomSpec a = default_phantom_spec(ModalityStyle::A);
  const PhantomSpec b = default_phantom_spec(ModalityStyle::B);
  CHECK(a.intensity_map != b.intensity_map);
  CHECK(a.noise_sigma != b.noise_sigma);
}

TEST_CASE("different geometry seeds give different label maps") {
  const LabeledSample a = synthesize_sample(default_phantom_spec(ModalityStyle::A, 32, 4, 1), 7);
  const LabeledSample b = synthesize_sample(default_phantom_spec(ModalityStyle::A, 32, 4, 2), 7);
  CHECK_FALSE(a.label == b.label);
}

TEST_CASE("images are clipped, float-exact and shaped like their labels") {
  for (ModalityStyle st : {ModalityStyle::A, ModalityStyle::B}) {
    const PhantomSpec spec = default_phantom_spec(st, 48, 5, 11);
    for (std::uint64_t s = 0; s < 20; ++s) {
      const LabeledSample x = synthesize_sample(spec, s);
      REQUIRE(x.image.shape() == Shape{1, 48, 48});
      REQUIRE(x.label.height() == 48);
      REQUIRE(x.label.width() == 48);
      for (std::size_t i = 0; i < x.image.size(); ++i) {
        const double v = x.image[i];
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
        CHECK(static_cast<double>(static_cast<float>(v)) == v);
        CHECK(x.label[i] < 5);
      }
    }
  }
}

TEST_CASE("class coverage and frequency over 1000 default phantoms") {
  // Every class must appear in at least 99% of images, and the corpus
  // frequency of each class must lie within [1%, 90%] of the pixels.
  const PhantomSpec spec = default_phantom_spec(ModalityStyle::B);
  const int classes = spec.num_classes;
  std::vector<double> total(classes, 0.0);
  std::vector<int> present(classes, 0);
  double pixels = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const LabeledSample x = synthesize_sample(spec, s);
    // Histogram by direct count, independent of LabelMap::histogram.
    std::vector<std::size_t> h(classes, 0);
    for (std::uint8_t v : x.label.values()) ++h[v];
    CHECK(h == x.label.histogram(classes));
    for (int c = 0; c < classes; ++c) {
      total[c] += static_cast<double>(h[c]);
      present[c] += h[c] > 0 ? 1 : 0;
    }
    pixels += static_cast<double>(x.label.size());
  }
  for (int c = 0; c < classes; ++c) {
    CAPTURE(c);
    CHECK(present[c] >= 990);
    CHECK(total[c] / pixels >= 0.01);
    CHECK(total[c] / pixels <= 0.90);
  }
}

TEST_CASE("invalid phantom specs are configuration errors") {
  PhantomSpec s = default_phantom_spec(ModalityStyle::A);
  s.num_classes = 1;
  CHECK_THROWS_AS(synthesize_sample(s, 0), ConfigError);
  s = default_phantom_spec(ModalityStyle::A);
  s.image_size = 15;
  CHECK_THROWS_AS(synthesize_sample(s, 0), ConfigError);
  s = default_phantom_spec(ModalityStyle::A);
  s.bias_strength = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = default_phantom_spec(ModalityStyle::A);
  s.intensity_map.pop_back();
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("augmentations are label-preserving pixel permutations") {
  const LabeledSample x = synthesize_sample(default_phantom_spec(ModalityStyle::A, 24, 4, 2), 3);
  const auto hist = x.label.histogram(4);
  for (Augmentation a : {Augmentation::identity, Augmentation::flip_horizontal, Augmentation::flip_vertical,
                         Augmentation::rotate90, Augmentation::rotate180, Augmentation::rotate270}) {
    const LabeledSample y = apply_augmentation(x, a);
    CHECK(y.label.histogram(4) == hist);
    // The image moves with the labels: the multiset of (label, value) pairs is unchanged.
    std::multiset<std::pair<int, double>> before, after;
    for (std::size_t i = 0; i < x.label.size(); ++i) {
      before.insert({x.label[i], x.image[i]});
      after.insert({y.label[i], y.image[i]});
    }
    CHECK(before == after);
  }
  CHECK(apply_augmentation(x, Augmentation::identity) == x);
}

TEST_CASE("augmentation group identities") {
  const LabeledSample x = synthesize_sample(default_phantom_spec(ModalityStyle::B, 20, 3, 4), 5);
  auto ap = [](LabeledSample s, std::initializer_list<Augmentation> seq) {
    for (Augmentation a : seq) s = apply_augmentation(s, a);
    return s;
  };
  using A = Augmentation;
  CHECK(ap(x, {A::rotate180, A::rotate180}) == x);
  CHECK(ap(x, {A::rotate90, A::rotate90, A::rotate90, A::rotate90}) == x);
  CHECK(ap(x, {A::rotate90, A::rotate270}) == x);
  CHECK(ap(x, {A::flip_horizontal, A::flip_horizontal}) == x);
  CHECK(ap(x, {A::flip_vertical, A::flip_vertical}) == x);
  CHECK(ap(x, {A::flip_horizontal, A::flip_vertical}) == apply_augmentation(x, A::rotate180));
  CHECK(ap(x, {A::rotate90, A::rotate90}) == apply_augmentation(x, A::rotate180));
  CHECK_FALSE(apply_augmentation(x, A::rotate90) == x);
}

TEST_CASE("rotation by 90 degrees moves the top-left corner") {
  LabelMap l(2, 2, std::vector<std::uint8_t>{1, 0, 0, 0});
  LabeledSample s{Image({1, 2, 2}, std::vector<double>{0.5, 0, 0, 0}), l, Modality::target};
  const LabeledSample r = apply_augmentation(s, Augmentation::rotate90);
  // A quarter turn sends the marked corner to one of the two adjacent corners.
  CHECK(r.label[0] == 0);
  CHECK(r.label[3] == 0);
  CHECK(r.label[1] + r.label[2] == 1);
  CHECK(r.image[1] + r.image[2] == 0.5);
}

TEST_CASE("augment_sample is seeded and reaches every transform") {
  const LabeledSample x = synthesize_sample(default_phantom_spec(ModalityStyle::A, 16, 4, 0), 1);
  std::set<Augmentation> seen;
  for (std::uint64_t s = 0; s < 200; ++s) {
    seen.insert(choose_augmentation(s));
    CHECK(augment_sample(x, s) == apply_augmentation(x, choose_augmentation(s)));
  }
  CHECK(seen.size() == 6);
}

TEST_CASE("dataset round trip is bit-exact") {
  const auto dir = test::scratch_dir("ds-roundtrip");
  for (Modality m : {Modality::assistant, Modality::target}) {
    const Dataset d = small_dataset(m, 4);
    write_dataset(d, dir / to_string(m));
    CHECK(read_dataset(dir / to_string(m)) == d);
  }
  // Values that are not representable as float are rounded on write.
  Dataset d = small_dataset();
  d.samples[0].image[0] = 0.1;
  write_dataset(d, dir / "rounded");
  CHECK(read_dataset(dir / "rounded").samples[0].image[0] == static_cast<double>(0.1f));
}

TEST_CASE("header layout is 32 bytes followed by float image and byte labels") {
  const auto dir = test::scratch_dir("ds-layout");
  const Dataset d = small_dataset();
  write_dataset(d, dir);
  const std::string bytes = slurp(dir / "00000.pxm");
  CHECK(bytes.size() == 32 + 16 * 16 * 5);
  std::uint32_t h = 0, w = 0, c = 0;
  std::memcpy(&h, bytes.data() + 8, 4);
  std::memcpy(&w, bytes.data() + 12, 4);
  std::memcpy(&c, bytes.data() + 16, 4);
  CHECK(h == 16);
  CHECK(w == 16);
  CHECK(c == 4);
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + 32, 4);
  CHECK(static_cast<double>(first) == d.samples[0].image[0]);
  CHECK(static_cast<std::uint8_t>(bytes[32 + 16 * 16 * 4]) == d.samples[0].label[0]);
}

TEST_CASE("corrupted files raise format errors naming the file") {
  const auto dir = test::scratch_dir("ds-corrupt");
  const Dataset d = small_dataset();
  auto expect_error = [&](const char* file) {
    try {
      read_dataset(dir);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(file) != std::string::npos);
    }
  };

  SUBCASE("bad magic") {
    write_dataset(d, dir);
    std::string b = slurp(dir / "00001.pxm");
    b[0] = 'X';
    dump(dir / "00001.pxm", b);
    expect_error("00001.pxm");
  }
  SUBCASE("truncated payload") {
    write_dataset(d, dir);
    std::string b = slurp(dir / "00002.pxm");
    dump(dir / "00002.pxm", b.substr(0, b.size() - 3));
    expect_error("00002.pxm");
  }
  SUBCASE("truncated header") {
    write_dataset(d, dir);
    dump(dir / "00000.pxm", "PXM");
    expect_error("00000.pxm");
  }
  SUBCASE("num_classes differs from the manifest") {
    write_dataset(d, dir);
    Dataset other = d;
    other.num_classes = 6;
    write_sample_file(other.samples[1], 6, dir / "00001.pxm");
    expect_error("00001.pxm");
  }
  SUBCASE("label out of range") {
    write_dataset(d, dir);
    std::string b = slurp(dir / "00000.pxm");
    b[32 + 16 * 16 * 4 + 5] = static_cast<char>(4);
    dump(dir / "00000.pxm", b);
    expect_error("00000.pxm");
  }
  SUBCASE("missing sample file") {
    write_dataset(d, dir);
    fs::remove(dir / "00002.pxm");
    expect_error("00002.pxm");
  }
  SUBCASE("missing manifest") {
    write_dataset(d, dir);
    fs::remove(dir / "meta.txt");
    expect_error("meta.txt");
  }
  SUBCASE("shape differs from the manifest") {
    write_dataset(d, dir);
    const LabeledSample big = synthesize_sample(default_phantom_spec(ModalityStyle::A, 20, 4, 5), 1);
    write_sample_file(big, 4, dir / "00001.pxm");
    expect_error("00001.pxm");
  }
}

TEST_CASE("dataset validation") {
  Dataset d = small_dataset();
  CHECK_NOTHROW(d.validate());
  Dataset mixed = d;
  mixed.samples[1].modality = Modality::assistant;
  CHECK_THROWS_AS(mixed.validate(), InputError);
  Dataset shape = d;
  shape.samples.push_back(synthesize_sample(default_phantom_spec(ModalityStyle::A, 20, 4, 5), 1));
  CHECK_THROWS_AS(shape.validate(), InputError);
  Dataset labels = d;
  labels.num_classes = 2;
  CHECK_THROWS_AS(labels.validate(), InputError);
}

TEST_CASE("style and modality names round trip") {
  for (ModalityStyle s : {ModalityStyle::A, ModalityStyle::B}) CHECK(parse_style(to_string(s)) == s);
  for (Modality m : {Modality::assistant, Modality::target}) CHECK(parse_modality(to_string(m)) == m);
  CHECK_THROWS(parse_style("C"));
}
