#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmclip/tensor.hpp"

namespace mmclip {

/// Labeled samples in [0,1]^d, stored row-major.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Shape sample_shape, std::size_t num_classes);

  const Shape& sample_shape() const { return sample_shape_; }
  std::size_t dim() const { return dim_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }

  std::span<const double> sample(std::size_t i) const {
    return {features_.data() + i * dim_, dim_};
  }
  int label(std::size_t i) const { return labels_[i]; }
  bool poisoned(std::size_t i) const { return poisoned_[i] != 0; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<double>& features() const { return features_; }

  void push(std::span<const double> x, int label, bool poisoned = false);
  void set_sample(std::size_t i, std::span<const double> x);
  void set_label(std::size_t i, int label) { labels_[i] = label; }
  void set_poisoned(std::size_t i, bool flag) { poisoned_[i] = flag ? 1 : 0; }

  std::vector<std::size_t> class_counts() const;
  std::vector<std::size_t> rows_of_class(int c) const;
  std::size_t poisoned_count() const;

  /// Inputs as a [N, sample_shape...] batch.
  Tensor inputs() const;
  Tensor inputs(std::span<const std::size_t> rows) const;

  Dataset subset(std::span<const std::size_t> rows) const;

  /// Throws DataError unless every value is in [0,1] and labels are valid.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  Shape sample_shape_;
  std::size_t dim_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<double> features_;
  std::vector<int> labels_;
  std::vector<std::uint8_t> poisoned_;
};

/// Small class-balanced set used for mitigation: the same number of
/// samples in every class, stored grouped by class.
class CleanSet {
 public:
  CleanSet() = default;
  /// Throws DataError unless `data` holds exactly per_class samples per class.
  explicit CleanSet(Dataset data);

  const Dataset& data() const { return data_; }
  std::size_t per_class() const { return per_class_; }
  std::size_t num_classes() const { return data_.num_classes(); }
  std::size_t size() const { return data_.size(); }
  Tensor inputs() const { return data_.inputs(); }
  const std::vector<int>& labels() const { return data_.labels(); }

 private:
  Dataset data_;
  std::size_t per_class_ = 0;
};

enum class DataFormat { csv, raw };

// CSV: header "label,f0,...,f{d-1}", one sample per row, '#' lines ignored.
// Raw: "MMDATA" | u8 version=1 | u32 classes | u32 rank | u32 dims... |
//      u64 count | per sample: u32 label, u8 poisoned, f64 x d (little-endian).
std::string encode_csv(const Dataset& ds);
std::string encode_raw(const Dataset& ds);
Dataset decode_csv(const std::string& text, std::size_t num_classes, Shape sample_shape = {});
Dataset decode_raw(const std::string& bytes);

void save_dataset(const Dataset& ds, const std::string& path, DataFormat format);
/// For CSV, num_classes bounds the labels and sample_shape defaults to {d}.
/// Values outside [0,1] are min-max scaled into it.
Dataset load_external(const std::string& path, DataFormat format, std::size_t num_classes,
                      Shape sample_shape = {});

}  // namespace mmclip
