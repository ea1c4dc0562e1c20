#pragma once

#include <string>
#include <vector>

#include "data/synthetic.hpp"
#include "encoder/encoder.hpp"

namespace dast::data {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout under a dataset directory:
//   dataset.json                      generation parameters
//   train.jsonl, val.jsonl, test.jsonl  {study_id, image_path, labels[14], report}
//   images/<id>.bin                   row-major f64 little-endian pixels
//   images/<id>.json                  {"height": H, "width": W}
void write_dataset(const SyntheticSpec& spec, const Split& split, const std::string& out_dir);

// gen_dataset = generate + write_dataset.
void gen_dataset(const SyntheticSpec& spec, const std::string& out_dir);

// Reads one manifest; image paths resolve relative to the manifest's directory.
std::vector<encoder::ImageSample> load_manifest(const std::string& manifest_path);

// Accepts a dataset directory plus a split name, or a manifest path directly.
std::vector<encoder::ImageSample> load_split(const std::string& data_dir, const std::string& split);
std::vector<encoder::ImageSample> load_split_path(const std::string& path);

struct DatasetInfo {
  std::size_t image_size = 0;
  std::size_t patch_size = 0;
};
DatasetInfo read_dataset_info(const std::string& data_dir);

}  // namespace dast::data
