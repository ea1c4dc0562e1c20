#include "data/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "data/binary_io.hpp"
#include "json.hpp"

namespace dast::data {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DatasetError("write to '" + path.string() + "' failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string manifest_text(const std::vector<encoder::ImageSample>& studies) {
  std::string out;
  for (const auto& s : studies) {
    ojson line;
    line["study_id"] = s.study_id;
    line["image_path"] = "images/" + s.study_id + ".bin";
    line["labels"] = s.labels;
    line["report"] = s.report;
    out += line.dump() + "\n";
  }
  return out;
}

}  // namespace

void write_dataset(const SyntheticSpec& spec, const Split& split, const std::string& out_dir) {
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw DatasetError("cannot create '" + (root / "images").string() + "': " + ec.message());
  ojson info;
  info["n_studies"] = spec.n_studies;
  info["image_size"] = spec.image_size;
  info["patch_size"] = spec.patch_size;
  info["seed"] = spec.seed;
  info["splits"] = {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}};
  write_text(root / "dataset.json", info.dump(2) + "\n");
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (const auto& s : *part) {
      io::ByteWriter w;
      for (double v : s.pixels) w.f64(v);
      w.write_file((root / "images" / (s.study_id + ".bin")).string());
      ojson shape;
      shape["height"] = s.height;
      shape["width"] = s.width;
      write_text(root / "images" / (s.study_id + ".json"), shape.dump() + "\n");
    }
  }
  write_text(root / "train.jsonl", manifest_text(split.train));
  write_text(root / "val.jsonl", manifest_text(split.val));
  write_text(root / "test.jsonl", manifest_text(split.test));
}

void gen_dataset(const SyntheticSpec& spec, const std::string& out_dir) { write_dataset(spec, generate(spec), out_dir); }

std::vector<encoder::ImageSample> load_manifest(const std::string& manifest_path) {
  const fs::path path(manifest_path);
  const fs::path base = path.parent_path();
  std::istringstream lines(read_text(path));
  std::vector<encoder::ImageSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = manifest_path + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      encoder::ImageSample s;
      s.study_id = j.at("study_id").get<std::string>();
      s.report = j.at("report").get<std::string>();
      const auto labels = j.at("labels").get<std::vector<int>>();
      if (labels.size() != kNumDiseases) throw DatasetError(where + ": expected 14 labels");
      for (std::size_t k = 0; k < kNumDiseases; ++k) {
        if (labels[k] != 0 && labels[k] != 1) throw DatasetError(where + ": labels must be 0 or 1");
        s.labels[k] = labels[k];
      }
      fs::path image = base / j.at("image_path").get<std::string>();
      fs::path sidecar = image;
      sidecar.replace_extension(".json");
      const auto shape = nlohmann::json::parse(read_text(sidecar));
      s.height = shape.at("height").get<std::size_t>();
      s.width = shape.at("width").get<std::size_t>();
      auto r = io::ByteReader::from_file(image.string());
      s.pixels.resize(s.height * s.width);
      for (auto& v : s.pixels) v = r.f64();
      if (!r.at_end()) throw DatasetError(image.string() + ": trailing bytes after pixel data");
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(where + ": " + e.what());
    } catch (const io::FormatError& e) {
      throw DatasetError(where + ": " + e.what());
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.study_id < b.study_id; });
  return out;
}

std::vector<encoder::ImageSample> load_split(const std::string& data_dir, const std::string& split) {
  return load_manifest((fs::path(data_dir) / (split + ".jsonl")).string());
}

std::vector<encoder::ImageSample> load_split_path(const std::string& path) {
  if (fs::is_directory(path)) return load_split(path, "test");
  return load_manifest(path);
}

DatasetInfo read_dataset_info(const std::string& data_dir) {
  try {
    const auto j = nlohmann::json::parse(read_text(fs::path(data_dir) / "dataset.json"));
    return {j.at("image_size").get<std::size_t>(), j.at("patch_size").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(data_dir + "/dataset.json: " + e.what());
  }
}

}  // namespace dast::data
