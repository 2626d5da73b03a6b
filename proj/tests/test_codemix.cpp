#include <set>

#include "doctest.h"
#include "support.hpp"
#include "xlkd/codemix.hpp"
#include "xlkd/errors.hpp"

using namespace xlkd;
using xlkd::test::make_vocab;

namespace {

std::string numbered_words(std::size_t n, const std::string& stem) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + stem + std::string(1, static_cast<char>('a' + i));
  return s;
}

WordAlignment diagonal(std::size_t n) {
  WordAlignment a;
  for (std::size_t i = 0; i < n; ++i) a.add(i, i);
  return a;
}

}  // namespace

TEST_CASE("parse_alignment reads Pharaoh links") {
  const auto a = parse_alignment("0-0 1-2");
  CHECK(a.links == std::vector<AlignmentLink>{{0, 0}, {1, 2}});
  CHECK(parse_alignment("").links.empty());
  CHECK(parse_alignment("   ").links.empty());
}

TEST_CASE("duplicate links collapse to one") {
  CHECK(parse_alignment("0-0 0-0").links.size() == 1);
}

TEST_CASE("malformed token names its line") {
  try {
    parse_alignment("0-0 1x2", 7);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("7") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_alignment("-1"), FormatError);
  CHECK_THROWS_AS(parse_alignment("1-"), FormatError);
}

TEST_CASE("load_alignments keeps corpus order and empty lines") {
  xlkd::test::TempDir dir;
  xlkd::test::write_file(dir / "a.txt", "0-0 1-1\n\n2-0\n");
  const auto all = load_alignments(dir / "a.txt");
  REQUIRE(all.size() == 3);
  CHECK(all[1].links.empty());
  CHECK(all[2].links == std::vector<AlignmentLink>{{2, 0}});
  dump_alignments(all, dir / "b.txt");
  CHECK(load_alignments(dir / "b.txt") == all);

  xlkd::test::write_file(dir / "bad.txt", "0-0\n0-0\nzz\n");
  try {
    load_alignments(dir / "bad.txt");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
}

TEST_CASE("eligibility rules") {
  const auto tv = make_vocab({"taxi", "snow", "##board", "red"});
  const auto sv = make_vocab({"taxi", "snow", "##bo", "##ard", "takushi", "yuki", "akai", "no"});
  const auto pair = make_sentence_pair("taxi snowboard red", "takushi yuki akai no");
  WordAlignment a;
  a.add(0, 0);  // taxi: same single subword in both
  a.add(1, 1);  // snowboard: segmentations differ
  a.add(2, 2);  // red: unknown to the student vocabulary
  // "no" is unaligned.
  CHECK(eligible_words(pair, a, sv, tv) == std::vector<std::size_t>{0});

  WordAlignment many;
  many.add(0, 0);
  many.add(0, 3);  // taxi aligned to two target words
  CHECK(eligible_words(pair, many, sv, tv).empty());
}

TEST_CASE("alignment past the sentence is a contract error") {
  const auto v = make_vocab({"a"});
  const auto pair = make_sentence_pair("a", "b");
  CHECK_THROWS_AS(eligible_words(pair, parse_alignment("0-4"), v, v), ContractError);
}

TEST_CASE("ratio 0 is the identity") {
  const auto pair = make_sentence_pair(numbered_words(5, "e"), numbered_words(5, "x"));
  const std::vector<std::size_t> eligible{0, 1, 2, 3, 4};
  const auto m = code_mix(pair, diagonal(5), eligible, CodeMixOptions{0.0}, 1);
  CHECK(m.words == pair.target_words);
  CHECK(m.replaced.empty());
}

TEST_CASE("20 eligible words at 0.15 replace exactly 3") {
  const auto pair = make_sentence_pair(numbered_words(20, "e"), numbered_words(20, "x"));
  std::vector<std::size_t> eligible(20);
  for (std::size_t i = 0; i < 20; ++i) eligible[i] = i;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = code_mix(pair, diagonal(20), eligible, CodeMixOptions{}, seed);
    CHECK(m.replaced.size() == 3);
    std::set<std::size_t> distinct;
    for (std::size_t i = 0; i < 20; ++i) {
      const bool replaced = m.words[i] != pair.target_words[i];
      if (replaced) {
        CHECK(m.words[i] == pair.source_words[i]);
        distinct.insert(i);
      }
    }
    CHECK(distinct.size() == 3);
  }
}

TEST_CASE("one eligible word caps the count at 1") {
  const auto pair = make_sentence_pair(numbered_words(20, "e"), numbered_words(20, "x"));
  const std::vector<std::size_t> eligible{7};
  const auto m = code_mix(pair, diagonal(20), eligible, CodeMixOptions{}, 5);
  REQUIRE(m.replaced.size() == 1);
  CHECK(m.replaced[0] == Replacement{7, 7});
}

TEST_CASE("same seed reproduces, and the vocab overload agrees with the index overload") {
  std::vector<std::string> common;
  for (char c = 'a'; c <= 'j'; ++c) common.push_back(std::string("w") + c);
  const auto v = make_vocab(common);
  const auto pair = make_sentence_pair(numbered_words(10, "w"), numbered_words(10, "t"));
  const auto a = code_mix(pair, diagonal(10), v, v, CodeMixOptions{0.3}, 42);
  CHECK(a == code_mix(pair, diagonal(10), v, v, CodeMixOptions{0.3}, 42));
  const auto eligible = eligible_words(pair, diagonal(10), v, v);
  CHECK(eligible.size() == 10);
  CHECK(a == code_mix(pair, diagonal(10), eligible, CodeMixOptions{0.3}, 42));
  CHECK(a.replaced.size() == 3);
}

TEST_CASE("eligible-word denominator and Bernoulli sampling stay switchable") {
  CodeMixOptions opts;
  CHECK(requested_replacements(20, 4, opts) == 3);
  opts.denominator = MixDenominator::EligibleWords;
  CHECK(requested_replacements(20, 4, opts) == 1);

  const auto pair = make_sentence_pair(numbered_words(20, "e"), numbered_words(20, "x"));
  std::vector<std::size_t> eligible(20);
  for (std::size_t i = 0; i < 20; ++i) eligible[i] = i;
  CodeMixOptions bern;
  bern.sampling = MixSampling::Bernoulli;
  std::size_t total = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) total += code_mix(pair, diagonal(20), eligible, bern, seed).replaced.size();
  const double mean = static_cast<double>(total) / 400.0;
  CHECK(mean == doctest::Approx(3.0).epsilon(0.1));
}

TEST_CASE("ratio outside [0, 1] is rejected") {
  const auto pair = make_sentence_pair("a", "b");
  const std::vector<std::size_t> none;
  CHECK_THROWS_AS(code_mix(pair, WordAlignment{}, none, CodeMixOptions{1.5}, 0), ContractError);
}
