// SPDX-License-Identifier: Apache-2.0
#include "cwamsn/hcsdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cwamsn/error.hpp"
#include "cwamsn/ndt_io.hpp"

namespace cwamsn::hcs {
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kManifestHeader = "batch_id,plate_id,well_id,perturbation_id,kind,image_path,C,H,W";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::size_t parse_size(const std::string& text, std::string_view column, std::size_t line_no) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw IoError("manifest line " + std::to_string(line_no) + ": column " + std::string(column) +
                  " is not a non-negative integer: '" + text + "'");
  }
  return value;
}

}  // namespace

std::string_view to_string(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::compound: return "compound";
    case PerturbationKind::gene_knockout: return "gene-knockout";
    case PerturbationKind::control: return "control";
  }
  return "unknown";
}

PerturbationKind parse_kind(std::string_view text) {
  if (text == "compound") return PerturbationKind::compound;
  if (text == "gene-knockout" || text == "gene") return PerturbationKind::gene_knockout;
  if (text == "control") return PerturbationKind::control;
  throw IoError("unknown perturbation kind '" + std::string(text) + "'");
}

DatasetManifest::DatasetManifest(std::vector<WellRecord> records, fs::path root)
    : records_(std::move(records)), root_(std::move(root)) {
  std::set<WellKey> keys;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (!keys.insert(r.key()).second) throw IoError("duplicate well key " + r.key().str());
    auto it = wells_.find(r.perturbation.id);
    if (it == wells_.end()) {
      perturbations_.push_back(r.perturbation);
      wells_.emplace(r.perturbation.id, std::vector<std::size_t>{i});
    } else {
      if (find(r.perturbation.id)->kind != r.perturbation.kind) {
        throw IoError("perturbation " + r.perturbation.id + " listed with conflicting kinds");
      }
      it->second.push_back(i);
    }
  }
}

const PerturbationId* DatasetManifest::find(std::string_view id) const {
  for (const auto& p : perturbations_) {
    if (p.id == id) return &p;
  }
  return nullptr;
}

std::span<const std::size_t> DatasetManifest::wells_of(std::string_view id) const {
  auto it = wells_.find(id);
  if (it == wells_.end()) return {};
  return it->second;
}

DatasetManifest load_manifest(const fs::path& manifest_csv) {
  std::ifstream in(manifest_csv);
  if (!in) throw IoError("cannot open manifest: " + manifest_csv.string());
  const fs::path root = manifest_csv.parent_path();
  std::string line;
  if (!std::getline(in, line) || strip_cr(line).rfind(kManifestHeader, 0) != 0) {
    throw IoError("manifest line 1: expected header '" + std::string(kManifestHeader) + "'");
  }
  std::vector<WellRecord> records;
  std::size_t line_no = 1;
  std::set<WellKey> keys;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 9 && f.size() != 10) {
      throw IoError("manifest line " + std::to_string(line_no) + ": expected 9 or 10 columns, got " +
                    std::to_string(f.size()));
    }
    WellRecord r;
    r.batch_id = f[0];
    r.plate_id = f[1];
    r.well_id = f[2];
    if (r.batch_id.empty() || r.plate_id.empty() || r.well_id.empty() || f[3].empty()) {
      throw IoError("manifest line " + std::to_string(line_no) + ": empty identifier");
    }
    try {
      r.perturbation = {f[3], parse_kind(f[4])};
    } catch (const IoError& e) {
      throw IoError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    r.image_path = f[5];
    r.channels = parse_size(f[6], "C", line_no);
    r.height = parse_size(f[7], "H", line_no);
    r.width = parse_size(f[8], "W", line_no);
    if (f.size() == 10 && !f[9].empty()) {
      try {
        r.dose = std::stod(f[9]);
      } catch (const std::exception&) {
        throw IoError("manifest line " + std::to_string(line_no) + ": bad dose '" + f[9] + "'");
      }
    }
    if (!keys.insert(r.key()).second) {
      throw IoError("manifest line " + std::to_string(line_no) + ": duplicate well key " + r.key().str());
    }
    if (!fs::exists(root / r.image_path)) {
      throw IoError("manifest line " + std::to_string(line_no) + ": missing image file " +
                    (root / r.image_path).string());
    }
    records.push_back(std::move(r));
  }
  try {
    return DatasetManifest(std::move(records), root);
  } catch (const IoError& e) {
    throw IoError(manifest_csv.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& manifest_csv, std::span<const WellRecord> records) {
  std::ofstream out(manifest_csv, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + manifest_csv.string());
  const bool with_dose = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.dose.has_value(); });
  out << kManifestHeader << (with_dose ? ",dose" : "") << '\n';
  for (const auto& r : records) {
    out << r.batch_id << ',' << r.plate_id << ',' << r.well_id << ',' << r.perturbation.id << ','
        << to_string(r.perturbation.kind) << ',' << r.image_path.generic_string() << ',' << r.channels << ','
        << r.height << ',' << r.width;
    if (with_dose) {
      out << ',';
      if (r.dose) out << *r.dose;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + manifest_csv.string());
}

nd::Tensor load_well_image(const WellRecord& record, const fs::path& root) {
  auto image = nd::load_ndt(root / record.image_path);
  const nd::Shape expected{record.channels, record.height, record.width};
  if (image.shape() != expected) {
    throw IntegrityError("image " + (root / record.image_path).string() + " has shape " +
                         nd::to_string(image.shape()) + " but the record says " + nd::to_string(expected));
  }
  for (float v : image.data()) {
    if (!std::isfinite(v)) throw IntegrityError("image " + (root / record.image_path).string() + " has non-finite values");
  }
  return image;
}

std::vector<std::pair<std::string, std::string>> read_pairs_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 2 || f[0].empty() || f[1].empty()) {
      throw IoError(path.string() + " line " + std::to_string(line_no) + ": expected two columns");
    }
    pairs.emplace_back(f[0], f[1]);
  }
  return pairs;
}

void write_pairs_csv(const fs::path& path, std::string_view header,
                     std::span<const std::pair<std::string, std::string>> pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write: " + path.string());
  out << header << '\n';
  for (const auto& [a, b] : pairs) out << a << ',' << b << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace cwamsn::hcs
