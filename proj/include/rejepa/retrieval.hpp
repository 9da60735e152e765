#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "rejepa/data.hpp"
#include "rejepa/linalg.hpp"
#include "rejepa/model.hpp"

namespace rejepa {

enum class Metric { euclidean, cosine };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

/// Immutable k-NN bank: one pooled embedding per archive id.
struct FeatureIndex {
  std::vector<std::string> ids;
  Matrix matrix;  // N x d, row i belongs to ids[i]
  Metric metric = Metric::euclidean;

  std::size_t size() const { return ids.size(); }
  /// Row of `id`, or -1.
  int row_of(const std::string& id) const;
  void validate() const;
};

struct Neighbor {
  std::string id;
  double distance = 0.0;
};

struct RetrievalResult {
  std::string query_id;
  std::vector<Neighbor> neighbors;
  double f1 = 0.0;
};

/// Euclidean: ||a - b||. Cosine: 1 - cos(a, b), and 1 when either vector is zero.
double distance(Metric metric, const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b);

FeatureIndex make_index(std::vector<std::string> ids, Matrix matrix, Metric metric);

/// Pools the target encoder (default) over every record, in archive order.
FeatureIndex build_index(const ModelState& model, const Archive& archive, Metric metric,
                         EncoderSide side = EncoderSide::target);

/// Exact k nearest neighbours, ordered by (distance, id). `exclude_id`, when
/// non-empty, is never returned.
std::vector<Neighbor> query(const FeatureIndex& index, const Eigen::Ref<const RowVector>& query_vector, int k,
                            const std::string& exclude_id = {});

/// Mean over the k retrieved items of the label-set F1 against the query's
/// labels (precision |Q&R|/|R|, recall |Q&R|/|Q|, 0 on empty intersection).
double f1_at_k(const LabelSet& query_labels, const std::vector<LabelSet>& neighbor_labels, int k);

struct EvaluationReport {
  double mean_f1 = 0.0;
  int k = 10;
  Metric metric = Metric::euclidean;
  std::vector<RetrievalResult> per_query;

  static constexpr const char* kProtocol = "label-set F1 averaged over the k retrieved items, macro-averaged over queries";
  nlohmann::json to_json() const;
};

/// Every record (which must be present in the index) is queried with its own
/// index row, excluding itself; neighbour labels come from `records`.
EvaluationReport evaluate_archive(const FeatureIndex& index, const Archive& records, int k = 10);

struct PermutationNull {
  double mean = 0.0;
  double stddev = 0.0;
  int n_permutations = 0;
};

/// Distribution of mean F1@k when labels are shuffled across records while the
/// neighbour lists stay fixed.
PermutationNull label_permutation_null(const FeatureIndex& index, const Archive& records, int k, int n_permutations,
                                       std::uint64_t seed);

inline constexpr std::uint32_t kIndexVersion = 1;

/// "RJPAIDX1" | u32 version | u32 metric (0 euclidean, 1 cosine) | u64 N | u64 d
/// | N x (u32 len + id bytes) | N*d f64 row-major. Little-endian.
void save_index(const std::filesystem::path& path, const FeatureIndex& index);
FeatureIndex load_index(const std::filesystem::path& path);

}  // namespace rejepa
