#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>
#include <string>
#include <vector>

#include "narrowbert/layout.hpp"

using namespace narrowbert;

namespace {

std::string symbols(const Layout& layout) {
  std::string out;
  for (const auto& a : layout.atoms) out += atom_symbol(a.kind);
  return out;
}

std::string repeat(const std::string& unit, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) out += unit;
  return out;
}

ParseErrorKind parse_error_kind(const std::string& text, std::size_t* offset) {
  try {
    parse_layout(text);
  } catch (const LayoutParseError& e) {
    *offset = e.offset();
    return e.kind();
  }
  FAIL("no parse error for " << text);
  return ParseErrorKind::Empty;
}

// Random valid layout as an atom string plus a notation that expands to it.
std::pair<std::string, std::string> random_valid(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> segments(1, 5), reps(1, 4), unit_len(1, 3),
      coin(0, 1);
  std::string atoms = "sf", notation = "sf";
  const int n = segments(rng);
  bool narrowed = false;
  for (int i = 0; i < n; ++i) {
    if (!narrowed && coin(rng) == 0) {
      atoms += ':';
      notation += ':';
      narrowed = true;
    }
    std::string unit;
    for (int j = unit_len(rng); j > 0; --j) unit += coin(rng) ? 's' : 'f';
    const int r = reps(rng);
    atoms += repeat(unit, r);
    notation += coin(rng) ? "{" + std::to_string(r) + "," + unit + "}"
                          : repeat(unit, r);
  }
  return {atoms, notation};
}

}  // namespace

TEST_CASE("notations used for the evaluated models") {
  const Layout base = parse_layout("{12,sf}");
  CHECK(base.atoms.size() == 24);
  CHECK_FALSE(base.has_narrow());
  CHECK(symbols(base) == repeat("sf", 12));

  CHECK(symbols(parse_layout("sf{5,s}:{5,f}")) == "sfsssss:fffff");
  CHECK(symbols(parse_layout("sf:{5,sf}")) == "sf:" + repeat("sf", 5));
  CHECK(symbols(parse_layout("sfsf{10,s}:{10,f}")) ==
        "sfsf" + repeat("s", 10) + ":" + repeat("f", 10));
  for (int k = 1; k <= 4; ++k) {
    const std::string text = "{" + std::to_string(k) + ",sf}:{" +
                             std::to_string(12 - k) + ",sf}";
    const Layout l = parse_layout(text);
    CHECK(symbols(l) == repeat("sf", k) + ":" + repeat("sf", 12 - k));
    CHECK(l.narrow_index() == std::size_t(2 * k));
    CHECK(parse_layout(render_layout(l)).atoms == l.atoms);
  }
  // Single repetitions render without braces.
  CHECK(render_layout(parse_layout("{1,sf}:{11,sf}")) == "sf:{11,sf}");
}

TEST_CASE("render canonical forms") {
  CHECK(render_layout(parse_layout("{2,sf}:{10,sf}")) == "{2,sf}:{10,sf}");
  CHECK(render_layout(parse_layout("sf")) == "sf");
  CHECK(render_layout(parse_layout("{12,sf}")) == "{12,sf}");
  const Layout cf = parse_layout("sf{5,s}:{5,f}");
  CHECK(symbols(parse_layout(render_layout(cf))) == symbols(cf));
}

TEST_CASE("1000 random layouts round-trip through render") {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 1000; ++i) {
    const auto [atoms, notation] = random_valid(rng);
    const Layout parsed = parse_layout(notation);
    REQUIRE(symbols(parsed) == atoms);
    const std::string rendered = render_layout(parsed);
    CHECK(parse_layout(rendered).atoms == parsed.atoms);
    CHECK(render_layout(parse_layout(rendered)) == rendered);
  }
}

TEST_CASE("parse errors carry distinct kinds and offsets") {
  std::size_t off = 99;
  CHECK(parse_error_kind("x{2,s}", &off) == ParseErrorKind::UnknownCharacter);
  CHECK(off == 0);
  CHECK(parse_error_kind("sf::", &off) == ParseErrorKind::MultipleNarrow);
  CHECK(off == 3);
  CHECK(parse_error_kind("sf:{0,f}", &off) == ParseErrorKind::ZeroRepetition);
  CHECK(off < 8);
  CHECK(parse_error_kind("sf{2,sf", &off) == ParseErrorKind::MalformedGroup);
  CHECK(off < 7);
  CHECK(parse_error_kind("{3,:}", &off) == ParseErrorKind::MalformedGroup);
  CHECK(parse_error_kind("ss:ff", &off) == ParseErrorKind::NarrowWithoutContext);
  CHECK(off == 2);
  CHECK(parse_error_kind("", &off) == ParseErrorKind::Empty);
  for (const char* bad : {"sfq", "{2,sf", "{,sf}", "{2sf}", "sf{2,}", "s f", "sf::f"}) {
    CHECK_THROWS_AS(parse_layout(bad), LayoutParseError);
    try {
      parse_layout(bad);
    } catch (const LayoutParseError& e) {
      CHECK(e.offset() < std::string(bad).size());
    }
  }
}

TEST_CASE("structural validation") {
  CHECK(validate_layout(parse_layout("sf:{5,sf}"), Mode::Pretrain).empty());
  CHECK(validate_layout(parse_layout("sf:{5,sf}"), Mode::Classify).empty());
  const Layout early{expand_notation(":{5,sf}"), ":{5,sf}"};
  const auto v1 = validate_layout(early, Mode::Pretrain);
  REQUIRE(v1.size() >= 1);
  CHECK(v1.front().kind == ViolationKind::NarrowBeforeContext);
  const Layout two{expand_notation("sf:sf:sf"), "sf:sf:sf"};
  bool found = false;
  for (const auto& v : validate_layout(two, Mode::Pretrain)) {
    found = found || v.kind == ViolationKind::MultipleNarrow;
  }
  CHECK(found);
}

TEST_CASE("flop formulas") {
  ModelDims dims{64, 4, 256, 1000, 512, 1e-12};
  CHECK(active_rows(512, 0.15) == 77);
  CHECK(active_rows(128, 0.15) == 20);
  CHECK(active_rows(10, 0.01) == 1);
  // Per feedforward atom, before vs after the narrow: exactly 512 / 77.
  const std::uint64_t before = feedforward_flops(512, dims);
  const std::uint64_t after = feedforward_flops(77, dims);
  CHECK(before * 77 == after * 512);
  CHECK(static_cast<double>(before) / static_cast<double>(after) ==
        doctest::Approx(6.649350649350649).epsilon(1e-15));

  const Layout l = parse_layout("sf:{2,sf}");
  const FlopReport full = estimate_flops(l, dims, 128, 1.0);
  CHECK(full.total_full == full.total_narrowed);
  CHECK(full.ratio == 1.0);
  const FlopReport none = estimate_flops(parse_layout("{3,sf}"), dims, 128, 0.15);
  CHECK(none.ratio == 1.0);
  CHECK_THROWS_AS(estimate_flops(l, dims, 128, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(estimate_flops(l, dims, 128, 1.5), std::invalid_argument);
}

TEST_CASE("flop totals match a hand count") {
  // L = 128, d = 64, d_ff = 256, m = ceil(0.15 * 128) = 20.
  const ModelDims dims{64, 4, 256, 1000, 128, 1e-12};
  const std::uint64_t wide_att = 8ull * 128 * 64 * 64 + 4ull * 128 * 128 * 64;
  const std::uint64_t wide_ff = 4ull * 128 * 64 * 256;
  const std::uint64_t narrow_att = 2ull * 20 * 64 * 64 + 4ull * 128 * 64 * 64 +
                                   2ull * 64 * 64 * 20 + 4ull * 20 * 128 * 64;
  const std::uint64_t narrow_ff = 4ull * 20 * 64 * 256;
  CHECK(wide_att == 4194304 + 4194304);
  CHECK(wide_ff == 8388608);
  CHECK(narrow_att == 163840 + 2097152 + 163840 + 655360);
  CHECK(narrow_ff == 1310720);

  const FlopReport base = estimate_flops(parse_layout("{12,sf}"), dims, 128, 0.15);
  CHECK(base.total_narrowed == 12 * (wide_att + wide_ff));
  const FlopReport sq = estimate_flops(parse_layout("{2,sf}:{10,sf}"), dims, 128, 0.15);
  const std::uint64_t expected = 2 * (wide_att + wide_ff) + 10 * (narrow_att + narrow_ff);
  CHECK(sq.total_narrowed == expected);
  CHECK(sq.total_full == base.total_narrowed);
  CHECK(sq.ratio == doctest::Approx(double(base.total_narrowed) / double(expected)));
  CHECK(sq.per_atom.size() == 25);
  CHECK(sq.per_atom[4].flops == 0);  // the marker
  CHECK(sq.per_atom[5].flops == narrow_att);
  CHECK(sq.per_atom[6].flops == narrow_ff);
}

TEST_CASE("ratio does not increase as the marker moves later") {
  const ModelDims dims{128, 4, 512, 1000, 512, 1e-12};
  for (std::size_t seq : {128u, 512u}) {
    double prev = 1e300;
    for (int k = 1; k <= 11; ++k) {
      const Layout l = parse_layout("{" + std::to_string(k) + ",sf}:{" +
                                    std::to_string(12 - k) + ",sf}");
      const double ratio = estimate_flops(l, dims, seq, 0.15).ratio;
      CHECK(ratio >= 1.0);
      CHECK(ratio <= prev);
      prev = ratio;
    }
  }
  // Same atom string, every legal marker position.
  const std::string atoms = "sfsfssffsf";
  double prev = 1e300;
  for (std::size_t cut = 2; cut <= atoms.size(); ++cut) {
    const std::string text = atoms.substr(0, cut) + ":" + atoms.substr(cut);
    const double ratio = estimate_flops(parse_layout(text), dims, 128, 0.15).ratio;
    CHECK(ratio <= prev);
    prev = ratio;
  }
}
