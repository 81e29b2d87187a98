#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "dream/dataset.hpp"
#include "dream/synthetic.hpp"
#include "oracles.hpp"

using namespace dream;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/dream_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("valid dataset passes validation") {
    const Dataset ds = oracles::tiny_dataset(3, 4, 6, 5, 1);
    CHECK_NOTHROW(validate_dataset(ds));
    CHECK(ds.size() == 12);
    CHECK(ds.feature_dim() == 6);
    CHECK(ds.behavior_count() == 5);
    CHECK(ds.family_name(0) == "fam0");
    CHECK(ds.families_present() == std::vector<int>{0, 1, 2});
}

TEST_CASE("validation pinpoints the first violated invariant") {
    Dataset ds = oracles::tiny_dataset(2, 3, 4, 3, 2);

    SUBCASE("duplicate ids") {
        ds.ids[1] = ds.ids[0];
        CHECK_THROWS_WITH_AS(validate_dataset(ds),
                             doctest::Contains("duplicate sample id"), InvalidInput);
    }
    SUBCASE("family index out of range") {
        ds.family[2] = 7;
        CHECK_THROWS_WITH_AS(validate_dataset(ds), doctest::Contains("family"), InvalidInput);
    }
    SUBCASE("feature outside the unit interval") {
        ds.features(0, 0) = 1.5;
        CHECK_THROWS_WITH_AS(validate_dataset(ds), doctest::Contains("[0,1]"), InvalidInput);
    }
    SUBCASE("non-finite feature") {
        ds.features(1, 1) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(validate_dataset(ds), InvalidInput);
    }
    SUBCASE("concept label outside {0,1}") {
        ds.concept_labels(0, 0) = 2;
        CHECK_THROWS_AS(validate_dataset(ds), InvalidInput);
    }
    SUBCASE("mask row count mismatch") {
        ds.concept_mask.conservativeResize(ds.size() - 1, Eigen::NoChange);
        CHECK_THROWS_AS(validate_dataset(ds), InvalidInput);
    }
    SUBCASE("duplicate family name") {
        ds.family_names[1] = ds.family_names[0];
        CHECK_THROWS_AS(validate_dataset(ds), InvalidInput);
    }
}

TEST_CASE("jsonl save and load round-trip exactly") {
    const Dataset ds = generate_synthetic(SyntheticSpec{.family_count = 3,
                                                        .samples_per_family = 10,
                                                        .seed = 5});
    TempFile f("roundtrip.jsonl");
    save_dataset(ds, f.path);
    const Dataset back = load_dataset(f.path);
    CHECK(back.features == ds.features);
    CHECK(back.family == ds.family);
    CHECK(back.concept_labels == ds.concept_labels);
    CHECK(back.concept_mask == ds.concept_mask);
    CHECK(back.timestamps == ds.timestamps);
    CHECK(back.ids == ds.ids);
    CHECK(back.family_names == ds.family_names);
    CHECK(back.behavior_names == ds.behavior_names);

    TempFile g("roundtrip2.jsonl");
    save_dataset(back, g.path);
    CHECK(read_file(f.path) == read_file(g.path));
}

TEST_CASE("load rejects malformed files with line context") {
    TempFile f("broken.jsonl");

    SUBCASE("missing header schema") {
        std::ofstream(f.path) << "{\"id\":0}\n";
        CHECK_THROWS_WITH_AS(load_dataset(f.path), doctest::Contains("schema"), IoError);
    }
    SUBCASE("feature width mismatch names the line") {
        std::ofstream(f.path)
            << R"({"schema":"drift-dataset-v1","feature_dim":3,"behaviors":["b0"],"families":["f"]})"
            << "\n"
            << R"({"id":0,"features":[0.5,0.5],"family":"f","concepts":{"labels":[1],"mask":[1]},"timestamp":0})"
            << "\n";
        CHECK_THROWS_WITH_AS(load_dataset(f.path), doctest::Contains("line 2"), IoError);
    }
    SUBCASE("unknown family name") {
        std::ofstream(f.path)
            << R"({"schema":"drift-dataset-v1","feature_dim":1,"behaviors":["b0"],"families":["f"]})"
            << "\n"
            << R"({"id":0,"features":[0.5],"family":"ghost","concepts":{"labels":[1],"mask":[1]},"timestamp":0})"
            << "\n";
        CHECK_THROWS_WITH_AS(load_dataset(f.path), doctest::Contains("ghost"), IoError);
    }
    SUBCASE("unparseable json") {
        std::ofstream(f.path) << "not json\n";
        CHECK_THROWS_AS(load_dataset(f.path), IoError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_dataset("/nonexistent/x.jsonl"), IoError); }
}

TEST_CASE("subset keeps the name tables and row identity") {
    const Dataset ds = oracles::tiny_dataset(3, 4, 6, 5, 3);
    const Dataset sub = ds.subset({2, 5, 11});
    CHECK(sub.size() == 3);
    CHECK(sub.family_names == ds.family_names);
    CHECK(sub.behavior_names == ds.behavior_names);
    CHECK(sub.ids == std::vector<std::int64_t>{2, 5, 11});
    CHECK(sub.features.row(1) == ds.features.row(5));
    CHECK(sub.concept_labels.row(2) == ds.concept_labels.row(11));
    CHECK(sub.find_id(5) == 1);
    CHECK(sub.find_id(3) == -1);
    CHECK_THROWS_AS(ds.subset({99}), InvalidInput);
}

TEST_CASE("concat stacks rows and rejects id collisions") {
    Dataset a = oracles::tiny_dataset(2, 3, 4, 3, 4);
    Dataset b = oracles::tiny_dataset(2, 2, 4, 3, 5);
    for (auto& id : b.ids) id += 100;
    const Dataset both = concat(a, b);
    CHECK(both.size() == 10);
    CHECK(both.features.row(7) == b.features.row(1));
    CHECK(both.ids[6] == 100);

    Dataset clash = b;
    clash.ids = a.ids;
    clash.ids.pop_back();
    clash.ids.push_back(999);
    CHECK_THROWS_AS(concat(a, clash), InvalidInput);
}

TEST_CASE("per-row concept view matches the matrices") {
    const Dataset ds = oracles::tiny_dataset(2, 2, 4, 3, 6);
    const ConceptLabelSet c = ds.concepts(3);
    CHECK(c.labels == ds.concept_labels.row(3).transpose());
    CHECK(c.mask == ds.concept_mask.row(3).transpose());
}
