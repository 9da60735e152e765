#include "rejepa/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "rejepa/errors.hpp"
#include "rejepa/random.hpp"

namespace rejepa {

std::string to_string(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

Metric metric_from_string(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  throw ConfigError("unknown metric '" + s + "' (expected euclidean or cosine)");
}

int FeatureIndex::row_of(const std::string& id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  return it == ids.end() ? -1 : int(it - ids.begin());
}

void FeatureIndex::validate() const {
  if (ids.empty()) throw ConfigError("feature index is empty");
  if (Eigen::Index(ids.size()) != matrix.rows()) throw ContractViolation("index ids and rows are misaligned");
  if (!matrix.allFinite()) throw ContractViolation("index contains non-finite embeddings");
  std::vector<std::string> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractViolation("index ids are not unique");
  }
}

double distance(Metric metric, const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
  if (metric == Metric::euclidean) return (a - b).norm();
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - a.dot(b) / (na * nb);
}

FeatureIndex make_index(std::vector<std::string> ids, Matrix matrix, Metric metric) {
  FeatureIndex index{std::move(ids), std::move(matrix), metric};
  index.validate();
  return index;
}

FeatureIndex build_index(const ModelState& model, const Archive& archive, Metric metric, EncoderSide side) {
  if (archive.empty()) throw ConfigError("cannot build an index over an empty archive");
  std::vector<std::string> ids;
  for (const auto& r : archive) ids.push_back(r.id);
  return make_index(std::move(ids), pooled_embeddings(model, archive, side), metric);
}

std::vector<Neighbor> query(const FeatureIndex& index, const Eigen::Ref<const RowVector>& query_vector, int k,
                            const std::string& exclude_id) {
  if (query_vector.size() != index.matrix.cols()) {
    throw ContractViolation("query width " + std::to_string(query_vector.size()) + " does not match index width " +
                            std::to_string(index.matrix.cols()));
  }
  std::vector<std::pair<double, int>> cand;
  cand.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!exclude_id.empty() && index.ids[i] == exclude_id) continue;
    cand.emplace_back(distance(index.metric, query_vector, index.matrix.row(Eigen::Index(i))), int(i));
  }
  if (k < 1 || std::size_t(k) > cand.size()) {
    throw ContractViolation("k=" + std::to_string(k) + " must lie in [1, " + std::to_string(cand.size()) + "]" +
                            (exclude_id.empty() ? " (archive size)" : " (archive size minus the excluded query)"));
  }
  auto closer = [&](const std::pair<double, int>& a, const std::pair<double, int>& b) {
    if (a.first != b.first) return a.first < b.first;
    return index.ids[a.second] < index.ids[b.second];
  };
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), closer);
  std::vector<Neighbor> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) out.push_back({index.ids[cand[i].second], cand[i].first});
  return out;
}

double f1_at_k(const LabelSet& query_labels, const std::vector<LabelSet>& neighbor_labels, int k) {
  if (query_labels.empty()) throw EvaluationError("query label set is empty");
  if (k < 1 || std::size_t(k) > neighbor_labels.size()) {
    throw ContractViolation("f1_at_k needs k in [1, number of neighbours]");
  }
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    const LabelSet& retrieved = neighbor_labels[i];
    std::size_t common = 0;
    for (const auto& l : retrieved) common += std::binary_search(query_labels.begin(), query_labels.end(), l);
    if (common == 0) continue;
    const double precision = double(common) / double(retrieved.size());
    const double recall = double(common) / double(query_labels.size());
    sum += 2.0 * precision * recall / (precision + recall);
  }
  return sum / double(k);
}

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& r : per_query) {
    nlohmann::json nb = nlohmann::json::array();
    for (const auto& n : r.neighbors) nb.push_back({{"id", n.id}, {"distance", n.distance}});
    per.push_back({{"query_id", r.query_id}, {"f1", r.f1}, {"neighbors", nb}});
  }
  return {{"mean_f1", mean_f1}, {"k", k}, {"metric", to_string(metric)}, {"protocol", kProtocol}, {"per_query", per}};
}

namespace {

std::unordered_map<std::string, const LabelSet*> label_lookup(const Archive& records) {
  std::unordered_map<std::string, const LabelSet*> labels;
  for (const auto& r : records) labels[r.id] = &r.labels;
  return labels;
}

std::vector<std::vector<int>> neighbour_rows(const FeatureIndex& index, const Archive& records, int k,
                                             std::vector<std::vector<Neighbor>>* lists = nullptr) {
  std::unordered_map<std::string, int> row;
  for (std::size_t i = 0; i < index.size(); ++i) row[index.ids[i]] = int(i);
  std::vector<std::vector<int>> out;
  for (const auto& r : records) {
    auto it = row.find(r.id);
    if (it == row.end()) throw EvaluationError("record '" + r.id + "' is not in the index");
    auto nb = query(index, index.matrix.row(it->second), k, r.id);
    std::vector<int> rows;
    for (const auto& n : nb) rows.push_back(row.at(n.id));
    out.push_back(std::move(rows));
    if (lists) lists->push_back(std::move(nb));
  }
  return out;
}

}  // namespace

EvaluationReport evaluate_archive(const FeatureIndex& index, const Archive& records, int k) {
  if (records.empty()) throw EvaluationError("no evaluation records");
  EvaluationReport report;
  report.k = k;
  report.metric = index.metric;
  const auto labels = label_lookup(records);
  std::vector<std::vector<Neighbor>> lists;
  neighbour_rows(index, records, k, &lists);
  double sum = 0.0;
  for (std::size_t q = 0; q < records.size(); ++q) {
    std::vector<LabelSet> retrieved;
    for (const auto& n : lists[q]) {
      auto it = labels.find(n.id);
      if (it == labels.end()) throw EvaluationError("no labels for retrieved id '" + n.id + "'");
      retrieved.push_back(*it->second);
    }
    RetrievalResult r{records[q].id, std::move(lists[q]), f1_at_k(records[q].labels, retrieved, k)};
    sum += r.f1;
    report.per_query.push_back(std::move(r));
  }
  report.mean_f1 = sum / double(records.size());
  return report;
}

PermutationNull label_permutation_null(const FeatureIndex& index, const Archive& records, int k, int n_permutations,
                                       std::uint64_t seed) {
  if (n_permutations < 2) throw ContractViolation("permutation test needs at least 2 permutations");
  if (Eigen::Index(records.size()) != index.matrix.rows()) {
    throw ContractViolation("permutation test needs every index row to have a record");
  }
  // Neighbour rows refer to index rows; map each index row to its record.
  std::unordered_map<std::string, int> record_of;
  for (std::size_t i = 0; i < records.size(); ++i) record_of[records[i].id] = int(i);
  std::vector<int> row_record(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) row_record[i] = record_of.at(index.ids[i]);
  const auto nb = neighbour_rows(index, records, k);

  Rng rng(derive_seed({seed, 0x7065726dULL}));
  std::vector<int> perm(records.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> scores;
  for (int p = 0; p < n_permutations; ++p) {
    std::shuffle(perm.begin(), perm.end(), rng);
    double sum = 0.0;
    for (std::size_t q = 0; q < records.size(); ++q) {
      std::vector<LabelSet> retrieved;
      for (int row : nb[q]) retrieved.push_back(records[perm[row_record[row]]].labels);
      sum += f1_at_k(records[perm[q]].labels, retrieved, k);
    }
    scores.push_back(sum / double(records.size()));
  }
  PermutationNull out;
  out.n_permutations = n_permutations;
  out.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / double(scores.size());
  double sq = 0.0;
  for (double s : scores) sq += (s - out.mean) * (s - out.mean);
  out.stddev = std::sqrt(sq / double(scores.size() - 1));
  return out;
}

namespace {
constexpr char kIndexMagic[8] = {'R', 'J', 'P', 'A', 'I', 'D', 'X', '1'};
}

void save_index(const std::filesystem::path& path, const FeatureIndex& index) {
  index.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write index " + path.string());
  auto pod = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kIndexMagic, sizeof(kIndexMagic));
  pod(kIndexVersion);
  pod(std::uint32_t(index.metric == Metric::euclidean ? 0 : 1));
  pod(std::uint64_t(index.matrix.rows()));
  pod(std::uint64_t(index.matrix.cols()));
  for (const auto& id : index.ids) {
    pod(std::uint32_t(id.size()));
    out.write(id.data(), std::streamsize(id.size()));
  }
  out.write(reinterpret_cast<const char*>(index.matrix.data()), std::streamsize(index.matrix.size() * sizeof(double)));
  if (!out) throw IoError("short write to index " + path.string());
}

FeatureIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open index " + path.string());
  auto fail = [&](const std::string& what) -> void { throw IoError("index " + path.string() + ": " + what); };
  auto pod = [&](auto& v) {
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) fail("truncated");
  };
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kIndexMagic, sizeof(magic)) != 0) fail("bad magic");
  std::uint32_t version = 0, metric = 0;
  std::uint64_t n = 0, d = 0;
  pod(version);
  if (version != kIndexVersion) fail("unsupported version " + std::to_string(version));
  pod(metric);
  if (metric > 1) fail("unknown metric tag " + std::to_string(metric));
  pod(n);
  pod(d);
  if (n * d > (std::uint64_t(1) << 32)) fail("implausible shape");
  FeatureIndex index;
  index.metric = metric == 0 ? Metric::euclidean : Metric::cosine;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t len = 0;
    pod(len);
    std::string id(len, '\0');
    if (len && !in.read(id.data(), len)) fail("truncated id table");
    index.ids.push_back(std::move(id));
  }
  index.matrix.resize(Eigen::Index(n), Eigen::Index(d));
  if (index.matrix.size() &&
      !in.read(reinterpret_cast<char*>(index.matrix.data()), std::streamsize(index.matrix.size() * sizeof(double)))) {
    fail("truncated matrix");
  }
  index.validate();
  return index;
}

}  // namespace rejepa
