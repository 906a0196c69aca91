#include "doctest.h"
#include "ofit/corpus.hpp"
#include "ofit/errors.hpp"
#include "support.hpp"

#include <stdexcept>
#include <set>
#include <sstream>

using namespace ofit;
using namespace ofit::corpus;
using testing::TempDir;

namespace {

const char* kTwoOutfits = R"([
  {"set_id": "o1", "items": [{"item_id": "a", "category": "tops"}, {"item_id": "b", "category": "shoes"},
                             {"item_id": "c", "category": "bags"}]},
  {"set_id": "o2", "items": [{"item_id": "d", "category": "tops"}, {"item_id": "e", "category": "shoes"},
                             {"item_id": "f", "category": "bags"}]}
])";

// Independent rule checker over "<color> <style> <noun>" captions.
bool rule_holds(const std::vector<std::string>& caps) {
  const std::map<std::string, int> palette = {{"red", 0},   {"orange", 0}, {"coral", 0}, {"blue", 1},
                                              {"teal", 1},  {"navy", 1},   {"black", 2}, {"white", 2},
                                              {"gray", 2},  {"brown", 3},  {"olive", 3}, {"tan", 3}};
  std::set<std::string> styles;
  std::set<int> palettes;
  for (const auto& c : caps) {
    std::istringstream ss(c);
    std::string color, style, noun;
    ss >> color >> style >> noun;
    styles.insert(style);
    palettes.insert(palette.at(color));
  }
  return styles.size() == 1 && palettes.size() == 1;
}

std::vector<std::string> captions_of(const CaptionMap& m, const std::vector<std::string>& ids) {
  std::vector<std::string> out;
  for (const auto& id : ids) out.push_back(m.at(id));
  return out;
}

}  // namespace

TEST_CASE("load_outfits parses and infers split from the file name") {
  TempDir dir;
  const auto outfits = load_outfits(dir.write("disjoint_train.json", kTwoOutfits));
  REQUIRE(outfits.size() == 2);
  CHECK(outfits[0].outfit_id == "o1");
  CHECK(outfits[0].item_ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(outfits[1].categories == std::vector<std::string>{"tops", "shoes", "bags"});
  CHECK(outfits[0].split == Split::train);
  CHECK(load_outfits(dir.write("test.json", kTwoOutfits))[0].split == Split::test);
  CHECK(load_outfits(dir.write("outfits.json", kTwoOutfits), Split::test)[0].split == Split::test);
  CHECK_THROWS_AS(load_outfits(dir.write("outfits.json", kTwoOutfits)), ValidationError);
}

TEST_CASE("load_outfits edge cases and errors") {
  TempDir dir;
  CHECK(load_outfits(dir.write("train.json", "[]")).empty());

  try {
    load_outfits(dir.write("train.json", "[\n  {\"set_id\": \"o1\",\n   \"items\": [}\n]"));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }

  CHECK_THROWS_AS(load_outfits(dir.write("train.json", R"([
    {"set_id": "o1", "items": [{"item_id": "a", "category": "tops"}, {"item_id": "b", "category": "bags"}]},
    {"set_id": "o1", "items": [{"item_id": "c", "category": "tops"}, {"item_id": "d", "category": "bags"}]}])")),
                  ValidationError);
  CHECK_THROWS_AS(load_outfits(dir.write("train.json", R"([
    {"set_id": "o1", "items": [{"item_id": "a", "category": "tops"}]}])")),
                  ValidationError);
  CHECK_THROWS_AS(load_outfits(dir.write("train.json", R"([
    {"set_id": "o1", "items": [{"item_id": "a", "category": "tops"}, {"item_id": "a", "category": "tops"}]}])")),
                  ValidationError);
  CHECK_THROWS(load_outfits(dir.file("missing_train.json")));
}

TEST_CASE("load_captions trims and checks totality") {
  TempDir dir;
  const auto m = load_captions(dir.write("c.json", R"({"i1": "black leather biker jacket"})"));
  CHECK(m.size() == 1);
  CHECK(m.at("i1") == "black leather biker jacket");
  CHECK(load_captions(dir.write("c.json", R"({"i1": "  red tee \n"})")).at("i1") == "red tee");

  try {
    load_captions(dir.write("c.json", R"({"i1": "  ", "i2": "ok", "i3": ""})"));
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("i1") != std::string::npos);
    CHECK(msg.find("i3") != std::string::npos);
    CHECK(msg.find("i2") == std::string::npos);
  }

  const auto outfits = load_outfits(dir.write("train.json", kTwoOutfits));
  try {
    load_captions(dir.write("c.json", R"({"a":"x","b":"x","c":"x","d":"x","e":"x"})"), outfits);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("f") != std::string::npos);
  }
}

TEST_CASE("load_fitb validates candidates and answer index") {
  TempDir dir;
  const auto ok = load_fitb(dir.write("f.json", R"([{"question": ["a","b","c"], "answers": ["d","e","f","g"],
                                                     "blank_position": 4, "answer_index": 2}])"));
  REQUIRE(ok.size() == 1);
  CHECK(ok[0].question_items.size() == 3);
  CHECK(ok[0].answer_index == 2);

  try {
    load_fitb(dir.write("f.json", R"([{"question": ["a"], "answers": ["d","e","f","g","h"], "answer_index": 0}])"));
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("expected 4 candidates") != std::string::npos);
  }
  CHECK_THROWS_AS(load_fitb(dir.write("f.json", R"([{"question": ["a"], "answers": ["d","e","f","g"],
                                                     "answer_index": 4}])")),
                  ValidationError);
  CHECK_THROWS_AS(load_fitb(dir.write("f.json", R"([{"question": ["a"], "answers": ["a","e","f","g"],
                                                     "answer_index": 1}])")),
                  ValidationError);
}

TEST_CASE("load_cp reads label and ids per line") {
  TempDir dir;
  const auto cp = load_cp(dir.write("cp.txt", "1 a b c\n0 d e\n"));
  REQUIRE(cp.size() == 2);
  CHECK(cp[0].label == 1);
  CHECK(cp[0].item_ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(cp[1].label == 0);
  CHECK_THROWS_AS(load_cp(dir.write("cp.txt", "2 a b\n")), ParseError);
  CHECK_THROWS_AS(load_cp(dir.write("cp.txt", "1 a\n")), ValidationError);
}

TEST_CASE("writers roundtrip through the loaders") {
  TempDir dir;
  const auto c = synth_corpus(20, 4);
  const auto train = c.split(Split::train);
  write_outfits(dir.file("train.json"), train);
  CHECK(load_outfits(dir.file("train.json")) == train);
  write_captions(dir.file("captions.json"), c.captions);
  CHECK(load_captions(dir.file("captions.json")) == c.captions);
  write_fitb(dir.file("fitb.json"), c.fitb_test);
  CHECK(load_fitb(dir.file("fitb.json")) == c.fitb_test);
  write_cp(dir.file("cp.txt"), c.cp_train);
  CHECK(load_cp(dir.file("cp.txt")) == c.cp_train);
}

TEST_CASE("make_cp_negatives counts, determinism and category preservation") {
  const auto c = synth_corpus(50, 2);
  const auto outfits = c.split(Split::train);
  std::vector<Outfit> ten(outfits.begin(), outfits.begin() + 10);
  const auto a = make_cp_negatives(ten, 1.0, 7);
  CHECK(a.size() == 20);
  CHECK(std::count_if(a.begin(), a.end(), [](auto& e) { return e.label == 1; }) == 10);
  CHECK(a == make_cp_negatives(ten, 1.0, 7));
  CHECK(a != make_cp_negatives(ten, 1.0, 8));

  std::vector<Outfit> nine(outfits.begin(), outfits.begin() + 9);
  const auto b = make_cp_negatives(nine, 0.5, 1);
  CHECK(std::count_if(b.begin(), b.end(), [](auto& e) { return e.label == 0; }) == 5);

  // every replacement keeps its category and comes from another outfit
  std::map<std::string, std::pair<std::string, std::string>> owner;  // item -> (outfit, category)
  for (const auto& o : ten) {
    for (std::size_t k = 0; k < o.item_ids.size(); ++k) owner[o.item_ids[k]] = {o.outfit_id, o.categories[k]};
  }
  for (std::size_t n = 10; n < a.size(); ++n) {
    const auto& neg = a[n].item_ids;
    bool matched = false;
    for (const auto& o : ten) {
      if (o.item_ids.size() != neg.size()) continue;
      bool ok = true;
      for (std::size_t k = 0; k < neg.size() && ok; ++k) {
        ok = owner.at(neg[k]).second == o.categories[k] && owner.at(neg[k]).first != o.outfit_id;
      }
      matched = matched || ok;
    }
    CHECK(matched);
  }

  CHECK_THROWS(make_cp_negatives(ten, 0.0, 1));
  CHECK_THROWS(make_cp_negatives(std::vector<Outfit>{}, 1.0, 1));
}

TEST_CASE("make_cp_negatives warns when a category has no alternative") {
  std::vector<Outfit> outfits = {
      {"o1", {"a", "b"}, {"tops", "hats"}, Split::train},
      {"o2", {"c", "d"}, {"tops", "shoes"}, Split::train},
  };
  std::vector<std::string> warnings;
  const auto out = make_cp_negatives(outfits, 1.0, 3, &warnings);
  CHECK(out.size() == 4);
  CHECK_FALSE(warnings.empty());
}

TEST_CASE("sampling is deterministic and without replacement") {
  const auto s = sample_indices(100, 10, 5);
  CHECK(s.size() == 10);
  CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 10);
  CHECK(std::is_sorted(s.begin(), s.end()));
  CHECK(s == sample_indices(100, 10, 5));
  CHECK(sample_indices(5, 10, 1).size() == 5);
}

TEST_CASE("check_disjoint rejects shared outfit ids") {
  std::vector<Outfit> a = {{"o1", {"a", "b"}, {"x", "y"}, Split::train}};
  std::vector<Outfit> b = {{"o2", {"c", "d"}, {"x", "y"}, Split::test}};
  CHECK_NOTHROW(check_disjoint(a, b));
  b.push_back({"o1", {"e", "f"}, {"x", "y"}, Split::test});
  CHECK_THROWS_AS(check_disjoint(a, b), ValidationError);
}

TEST_CASE("synthetic corpus obeys its rule") {
  const auto c = synth_corpus(100, 1);
  CHECK(c.outfits.size() == 100);
  CHECK(c.split(Split::train).size() == 80);
  CHECK_NOTHROW(check_disjoint(c.split(Split::train), c.split(Split::test)));
  CHECK_NOTHROW(require_captions(c.captions, c.outfits, c.fitb_train, c.cp_train));
  CHECK_NOTHROW(require_captions(c.captions, c.outfits, c.fitb_test, c.cp_test));

  for (const auto& o : c.outfits) CHECK(rule_holds(captions_of(c.captions, o.item_ids)));
  for (const auto* set : {&c.cp_train, &c.cp_test}) {
    for (const auto& e : *set) {
      const auto caps = captions_of(c.captions, e.item_ids);
      CHECK(rule_holds(caps) == (e.label == 1));
      CHECK(synth::compatible(caps) == (e.label == 1));
    }
  }
  for (const auto* set : {&c.fitb_train, &c.fitb_test}) {
    for (const auto& f : *set) {
      CHECK_NOTHROW(validate(f));
      for (int k = 0; k < 4; ++k) {
        auto caps = captions_of(c.captions, f.question_items);
        caps.push_back(c.captions.at(f.candidates[static_cast<std::size_t>(k)]));
        CHECK(rule_holds(caps) == (k == f.answer_index));
      }
    }
  }
  CHECK(c.fitb_train.size() + c.fitb_test.size() == 100);
}

TEST_CASE("synthetic corpus is deterministic") {
  const auto a = synth_corpus(40, 9), b = synth_corpus(40, 9), d = synth_corpus(40, 10);
  CHECK(a.outfits == b.outfits);
  CHECK(a.captions == b.captions);
  CHECK(a.fitb_test == b.fitb_test);
  CHECK(a.cp_train == b.cp_train);
  CHECK(a.captions != d.captions);
  CHECK_THROWS_AS(synth_corpus(7, 1), ConfigError);
}

TEST_CASE("small synthetic corpora still produce rule-breaking negatives") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto c = synth_corpus(8, seed);
    for (const auto& e : c.cp_test) {
      CHECK(rule_holds(captions_of(c.captions, e.item_ids)) == (e.label == 1));
    }
  }
}
