#include "conceptlens/dataset.hpp"
#include "conceptlens/error.hpp"
#include "conceptlens/synthetic.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <fstream>

using namespace clens;

namespace {

ErrorCode error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected clens::Error");
  return ErrorCode::io;
}

}  // namespace

TEST_CASE("json dataset with 12 items per each of 5 labels") {
  const LabeledDataset synthetic = generate_synthetic_dataset(5, 12, 16, 3, 7);
  const LabeledDataset parsed = parse_dataset_json(dataset_to_json(synthetic));
  CHECK(parsed.size() == 60);
  CHECK(parsed.num_concepts() == 5);
  CHECK(parsed.support() == std::vector<int>(5, 12));
  CHECK(parsed == synthetic);
}

TEST_CASE("minimal dataset: one item per label") {
  const auto ds = parse_dataset_json(R"({"labels":["a","b"],"items":[
    {"id":"x","label":"b","text":"first"},{"id":"y","label":"a","tokens":[1,2]}]})");
  CHECK(ds.size() == 2);
  CHECK(ds.item_labels == std::vector<ConceptId>{1, 0});
  CHECK(ds.items[0].text == "first");
  CHECK(ds.items[1].tokens == std::vector<Token>{1, 2});
}

TEST_CASE("dataset validation errors") {
  CHECK(error_of([] {
          parse_dataset_json(R"({"labels":["Extraversion","Agreeableness"],"items":[
            {"id":"1","label":"Openness","text":"x"}]})");
        }) == ErrorCode::unknown_label);
  CHECK(error_of([] {
          parse_dataset_json(R"({"labels":["a","b"],"items":[
            {"id":"1","label":"a","text":"x"},{"id":"1","label":"b","text":"y"}]})");
        }) == ErrorCode::duplicate_id);
  CHECK(error_of([] { parse_dataset_json(R"({"labels":["a","b"],"items":[]})"); }) == ErrorCode::empty_dataset);
  CHECK(error_of([] { parse_dataset_json("{not json"); }) == ErrorCode::parse);
  CHECK(error_of([] {
          parse_dataset_json(R"({"labels":["a","b"],"items":[{"id":"1","label":"a","text":"x"}]})");
        }) == ErrorCode::missing_class);
  CHECK(error_of([] { parse_dataset_json(R"({"labels":["a"],"items":[{"id":"1","label":"a","text":"x"}]})"); }) ==
        ErrorCode::invalid_argument);
  CHECK(error_of([] { parse_dataset_json(R"({"labels":["a","b"],"items":[{"id":"1","label":"a"}]})"); }) ==
        ErrorCode::invalid_argument);
}

TEST_CASE("csv dataset keeps file order and handles quoting") {
  const std::string csv =
      "id,label,text\n"
      "i1,Agreeableness,\"Is compassionate, has a soft heart\"\n"
      "i2,Extraversion,\"Is \"\"outgoing\"\"\"\n"
      "i3,Agreeableness,Is polite\n";
  const auto ds = parse_dataset_csv(csv);
  REQUIRE(ds.size() == 3);
  CHECK(ds.labels[0].name == "Agreeableness");
  CHECK(ds.labels[1].name == "Extraversion");
  CHECK(ds.items[0].text == "Is compassionate, has a soft heart");
  CHECK(ds.items[1].text == "Is \"outgoing\"");
  CHECK(ds.items[2].id == "i3");

  const auto declared = parse_dataset_csv(csv, std::vector<std::string>{"Extraversion", "Agreeableness"});
  CHECK(declared.item_labels == std::vector<ConceptId>{1, 0, 1});
  CHECK(error_of([&] { parse_dataset_csv(csv, std::vector<std::string>{"Extraversion", "Openness"}); }) ==
        ErrorCode::unknown_label);
}

TEST_CASE("load_dataset picks format from extension") {
  const auto dir = testing::scratch_dir("dataset");
  {
    std::ofstream(dir / "d.csv") << "id,label,text\na,x,one\nb,y,two\n";
  }
  const auto ds = load_dataset(dir / "d.csv");
  CHECK(ds.size() == 2);
  CHECK(error_of([&] { load_dataset(dir / "missing.json"); }) == ErrorCode::io);
}

TEST_CASE("dataset digest is sensitive to content") {
  const auto a = generate_synthetic_dataset(5, 12, 16, 3, 7);
  auto b = a;
  CHECK(dataset_digest(a) == dataset_digest(b));
  CHECK(dataset_digest(a).size() == 64);
  (*b.items[3].tokens)[0] ^= 1;
  CHECK(dataset_digest(a) != dataset_digest(b));
  auto c = a;
  c.items[0].id = "renamed";
  CHECK(dataset_digest(a) != dataset_digest(c));
  // Known SHA-256 vector.
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("synthetic generator") {
  SUBCASE("paper-sized set") {
    const auto ds = generate_synthetic_dataset(5, 12, 16, 3, 7);
    const SyntheticVocabulary vocab{5, 64};
    CHECK(ds.size() == 60);
    CHECK(ds.support() == std::vector<int>(5, 12));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& tokens = *ds.items[i].tokens;
      const ConceptId c = ds.item_labels[i];
      REQUIRE(tokens.size() == 16);
      CHECK(tokens.back() == vocab.query());
      int markers = 0;
      for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        if (tokens[t] == vocab.marker(c)) {
          ++markers;
        } else {
          CHECK(tokens[t] >= vocab.first_filler());
        }
      }
      CHECK(markers == 3);
    }
  }
  SUBCASE("minimal case") {
    const auto ds = generate_synthetic_dataset(2, 1, 4, 1, 0);
    CHECK(ds.size() == 2);
    for (std::size_t i = 0; i < 2; ++i)
      CHECK(std::count(ds.items[i].tokens->begin(), ds.items[i].tokens->end(), ds.item_labels[i]) == 1);
  }
  SUBCASE("deterministic") {
    CHECK(generate_synthetic_dataset(5, 12, 16, 3, 7) == generate_synthetic_dataset(5, 12, 16, 3, 7));
    CHECK(!(generate_synthetic_dataset(5, 12, 16, 3, 7) == generate_synthetic_dataset(5, 12, 16, 3, 8)));
  }
  SUBCASE("errors") {
    CHECK(error_of([] { generate_synthetic_dataset(5, 12, 16, 3, 7, 11); }) == ErrorCode::vocabulary);
    CHECK(error_of([] { generate_synthetic_dataset(2, 1, 2, 1, 0); }) == ErrorCode::invalid_argument);
    CHECK(error_of([] { generate_synthetic_dataset(1, 3, 8, 1, 0); }) == ErrorCode::invalid_argument);
  }
}
