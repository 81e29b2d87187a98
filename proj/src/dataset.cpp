#include "dream/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

namespace dream {

using nlohmann::json;

const std::string& Dataset::family_name(int row) const {
    return family_names.at(static_cast<std::size_t>(family.at(static_cast<std::size_t>(row))));
}

ConceptLabelSet Dataset::concepts(int row) const {
    ConceptLabelSet c;
    c.labels = concept_labels.row(row).transpose();
    c.mask = concept_mask.row(row).transpose();
    return c;
}

Dataset Dataset::subset(const std::vector<int>& rows) const {
    Dataset out;
    out.family_names = family_names;
    out.behavior_names = behavior_names;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.concept_labels.resize(static_cast<Eigen::Index>(rows.size()), concept_labels.cols());
    out.concept_mask.resize(static_cast<Eigen::Index>(rows.size()), concept_mask.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int r = rows[i];
        if (r < 0 || r >= size()) throw InvalidInput("subset: row index out of range");
        out.features.row(static_cast<Eigen::Index>(i)) = features.row(r);
        out.concept_labels.row(static_cast<Eigen::Index>(i)) = concept_labels.row(r);
        out.concept_mask.row(static_cast<Eigen::Index>(i)) = concept_mask.row(r);
        out.family.push_back(family[static_cast<std::size_t>(r)]);
        out.timestamps.push_back(timestamps[static_cast<std::size_t>(r)]);
        out.ids.push_back(ids[static_cast<std::size_t>(r)]);
    }
    return out;
}

int Dataset::find_id(std::int64_t id) const {
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == id) return static_cast<int>(i);
    return -1;
}

std::vector<int> Dataset::families_present() const {
    std::set<int> seen(family.begin(), family.end());
    return {seen.begin(), seen.end()};
}

void validate_dataset(const Dataset& ds) {
    const int n = ds.size();
    const auto expect = [&](bool ok, const std::string& what) {
        if (!ok) throw InvalidInput("dataset: " + what);
    };
    expect(static_cast<int>(ds.family.size()) == n, "family column length mismatch");
    expect(static_cast<int>(ds.timestamps.size()) == n, "timestamp column length mismatch");
    expect(static_cast<int>(ds.ids.size()) == n, "id column length mismatch");
    expect(ds.concept_labels.rows() == n && ds.concept_mask.rows() == n,
           "concept column length mismatch");
    expect(ds.concept_labels.cols() == ds.behavior_count() &&
               ds.concept_mask.cols() == ds.behavior_count(),
           "concept width does not match behavior table");
    expect(ds.features.allFinite(), "non-finite feature value");
    expect(n == 0 || (ds.features.minCoeff() >= 0.0 && ds.features.maxCoeff() <= 1.0),
           "feature value outside [0,1]");
    for (int f : ds.family)
        expect(f >= 0 && f < static_cast<int>(ds.family_names.size()),
               "family index outside name table");
    expect((ds.concept_labels.array() == 0 || ds.concept_labels.array() == 1).all(),
           "concept label not in {0,1}");
    expect((ds.concept_mask.array() == 0 || ds.concept_mask.array() == 1).all(),
           "concept mask not in {0,1}");
    std::set<std::int64_t> seen;
    for (auto id : ds.ids) expect(seen.insert(id).second, "duplicate sample id");
    std::set<std::string> fam_seen(ds.family_names.begin(), ds.family_names.end());
    expect(fam_seen.size() == ds.family_names.size(), "duplicate family name");
}

void save_dataset(const Dataset& ds, const std::string& path) {
    validate_dataset(ds);
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);

    json header = {{"schema", "drift-dataset-v1"},
                   {"feature_dim", ds.feature_dim()},
                   {"behaviors", ds.behavior_names},
                   {"families", ds.family_names}};
    out << header.dump() << "\n";

    for (int r = 0; r < ds.size(); ++r) {
        json row;
        row["id"] = ds.ids[static_cast<std::size_t>(r)];
        std::vector<double> feats(ds.features.row(r).begin(), ds.features.row(r).end());
        row["features"] = feats;
        row["family"] = ds.family_name(r);
        std::vector<int> labels(ds.concept_labels.row(r).begin(), ds.concept_labels.row(r).end());
        std::vector<int> mask(ds.concept_mask.row(r).begin(), ds.concept_mask.row(r).end());
        row["concepts"] = {{"labels", labels}, {"mask", mask}};
        row["timestamp"] = ds.timestamps[static_cast<std::size_t>(r)];
        out << row.dump() << "\n";
    }
    if (!out) throw IoError("failed writing dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for read: " + path);

    std::string line;
    if (!std::getline(in, line)) throw IoError("dataset file is empty: " + path);

    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw IoError("dataset header is not valid JSON: " + std::string(e.what()));
    }
    if (header.value("schema", "") != "drift-dataset-v1")
        throw IoError("dataset header: unsupported schema tag");

    Dataset ds;
    const int dim = header.at("feature_dim").get<int>();
    ds.behavior_names = header.at("behaviors").get<std::vector<std::string>>();
    ds.family_names = header.at("families").get<std::vector<std::string>>();

    std::vector<std::vector<double>> feats;
    std::vector<std::vector<int>> labels, masks;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            feats.push_back(row.at("features").get<std::vector<double>>());
            if (static_cast<int>(feats.back().size()) != dim)
                throw IoError("dataset line " + std::to_string(line_no) +
                              ": feature length does not match header");
            const auto fam = row.at("family").get<std::string>();
            auto it = std::find(ds.family_names.begin(), ds.family_names.end(), fam);
            if (it == ds.family_names.end())
                throw IoError("dataset line " + std::to_string(line_no) +
                              ": family not in header table: " + fam);
            ds.family.push_back(static_cast<int>(it - ds.family_names.begin()));
            labels.push_back(row.at("concepts").at("labels").get<std::vector<int>>());
            masks.push_back(row.at("concepts").at("mask").get<std::vector<int>>());
            ds.timestamps.push_back(row.at("timestamp").get<std::int64_t>());
            ds.ids.push_back(row.at("id").get<std::int64_t>());
        } catch (const json::exception& e) {
            throw IoError("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
    }

    const int n = static_cast<int>(feats.size());
    const int b = static_cast<int>(ds.behavior_names.size());
    ds.features.resize(n, dim);
    ds.concept_labels.resize(n, b);
    ds.concept_mask.resize(n, b);
    for (int r = 0; r < n; ++r) {
        const auto& fr = feats[static_cast<std::size_t>(r)];
        ds.features.row(r) = Eigen::Map<const RowVec>(fr.data(), dim);
        const auto& lr = labels[static_cast<std::size_t>(r)];
        const auto& mr = masks[static_cast<std::size_t>(r)];
        if (static_cast<int>(lr.size()) != b || static_cast<int>(mr.size()) != b)
            throw IoError("dataset line " + std::to_string(r + 2) +
                          ": concept length does not match behavior table");
        for (int c = 0; c < b; ++c) {
            ds.concept_labels(r, c) = lr[static_cast<std::size_t>(c)];
            ds.concept_mask(r, c) = mr[static_cast<std::size_t>(c)];
        }
    }
    validate_dataset(ds);
    return ds;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.feature_dim() != b.feature_dim()) throw InvalidInput("concat: feature dims differ");
    if (a.family_names != b.family_names || a.behavior_names != b.behavior_names)
        throw InvalidInput("concat: name tables differ");
    Dataset out;
    out.family_names = a.family_names;
    out.behavior_names = a.behavior_names;
    out.features.resize(a.size() + b.size(), a.feature_dim());
    out.features << a.features, b.features;
    out.concept_labels.resize(a.size() + b.size(), a.concept_labels.cols());
    out.concept_labels << a.concept_labels, b.concept_labels;
    out.concept_mask.resize(a.size() + b.size(), a.concept_mask.cols());
    out.concept_mask << a.concept_mask, b.concept_mask;
    out.family = a.family;
    out.family.insert(out.family.end(), b.family.begin(), b.family.end());
    out.timestamps = a.timestamps;
    out.timestamps.insert(out.timestamps.end(), b.timestamps.begin(), b.timestamps.end());
    out.ids = a.ids;
    out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
    validate_dataset(out);
    return out;
}

}  // namespace dream
