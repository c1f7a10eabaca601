// Copyright 2026 The lmort Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmort/hidden_states.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <string_view>

#include <json.hpp>

#include "binary_io.hpp"
#include "lmort/error.hpp"

namespace lmort {
namespace {

constexpr std::string_view kDumpMagic = "HSD1";

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::ifstream open_text(const std::filesystem::path& path, std::string_view what) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open " + std::string(what) + ": " + path.string());
  }
  return in;
}

std::ofstream create_text(const std::filesystem::path& path, std::string_view what) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DataError("cannot open " + std::string(what) + " for writing: " + path.string());
  }
  return out;
}

void finish_text(std::ofstream& out, const std::filesystem::path& path) {
  out.close();
  if (out.fail()) {
    throw DataError("write failed: " + path.string());
  }
}

// Reads non-empty lines, stripping a trailing '\r'. Callback gets (line_no, line).
template <typename Fn>
void for_each_line(const std::filesystem::path& path, std::string_view what, Fn&& fn) {
  auto in = open_text(path, what);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fn(line_no, std::string_view(line));
  }
}

[[noreturn]] void line_error(const std::filesystem::path& path, std::size_t line_no, const std::string& msg) {
  throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
}

}  // namespace

std::size_t LayeredStates::d_model() const {
  return states.empty() ? 0 : static_cast<std::size_t>(states.front().cols());
}

std::size_t LayeredStates::real_token_count() const {
  return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), std::uint8_t{1}));
}

bool LayeredStates::has_layer(std::uint32_t layer) const {
  return std::binary_search(layer_indices.begin(), layer_indices.end(), layer);
}

const MatrixF& LayeredStates::layer(std::uint32_t layer) const {
  const auto it = std::lower_bound(layer_indices.begin(), layer_indices.end(), layer);
  if (it == layer_indices.end() || *it != layer) {
    throw DataError("sequence '" + sequence_id + "' has no stored layer " + std::to_string(layer));
  }
  return states[static_cast<std::size_t>(it - layer_indices.begin())];
}

void LayeredStates::validate() const {
  const std::string where = "record '" + sequence_id + "': ";
  if (sequence_id.empty()) {
    throw FormatError("record with empty sequence_id");
  }
  if (attention_mask.empty()) {
    throw FormatError(where + "token count must be positive");
  }
  if (layer_indices.size() != states.size()) {
    throw FormatError(where + "layer index count does not match stored matrices");
  }
  for (std::size_t i = 1; i < layer_indices.size(); ++i) {
    if (layer_indices[i] <= layer_indices[i - 1]) {
      throw FormatError(where + "layer indices must be unique and ascending");
    }
  }
  const auto n = static_cast<Eigen::Index>(attention_mask.size());
  const auto d = static_cast<Eigen::Index>(d_model());
  for (const auto& m : states) {
    if (m.rows() != n || m.cols() != d) {
      throw FormatError(where + "layer matrices must all be n x d");
    }
  }
  bool any_real = false;
  for (std::uint8_t bit : attention_mask) {
    if (bit > 1) throw FormatError(where + "mask entries must be 0 or 1");
    any_real = any_real || bit == 1;
  }
  if (!any_real) {
    throw FormatError(where + "at least one token must be unmasked");
  }
}

bool operator==(const LayeredStates& a, const LayeredStates& b) {
  if (a.sequence_id != b.sequence_id || a.layer_indices != b.layer_indices ||
      a.attention_mask != b.attention_mask || a.states.size() != b.states.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.states.size(); ++i) {
    const auto& x = a.states[i];
    const auto& y = b.states[i];
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) != 0) return false;
  }
  return true;
}

std::uint64_t write_dump(std::span<const LayeredStates> records, const std::filesystem::path& path) {
  std::uint32_t d_model = 0;
  std::vector<std::uint32_t> layers;
  if (!records.empty()) {
    d_model = static_cast<std::uint32_t>(records.front().d_model());
    layers = records.front().layer_indices;
  }
  for (const auto& rec : records) {
    rec.validate();
    if (rec.d_model() != d_model) {
      throw FormatError("mixed dimensions in dump: record '" + rec.sequence_id + "' has d=" +
                        std::to_string(rec.d_model()) + ", expected " + std::to_string(d_model));
    }
    if (rec.layer_indices != layers) {
      throw FormatError("mixed layer sets in dump: record '" + rec.sequence_id + "'");
    }
  }

  detail::BinaryWriter out(path, "dump");
  out.magic(kDumpMagic);
  out.u32(d_model);
  out.u32(static_cast<std::uint32_t>(layers.size()));
  for (std::uint32_t l : layers) out.u32(l);
  out.u64(records.size());
  for (const auto& rec : records) {
    out.string16(rec.sequence_id);
    out.u32(static_cast<std::uint32_t>(rec.token_count()));
    out.bytes(rec.attention_mask.data(), rec.attention_mask.size());
    for (const auto& m : rec.states) {
      out.f32_array(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
    }
  }
  return out.finish();
}

namespace {

DumpHeader parse_header(detail::BinaryReader& in) {
  in.expect_magic(kDumpMagic, "HSD");
  DumpHeader header;
  header.d_model = in.u32();
  const std::uint32_t layer_count = in.u32();
  header.layer_indices.reserve(layer_count);
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    header.layer_indices.push_back(in.u32());
  }
  for (std::size_t i = 1; i < header.layer_indices.size(); ++i) {
    if (header.layer_indices[i] <= header.layer_indices[i - 1]) {
      in.fail("dump layer indices must be unique and ascending");
    }
  }
  header.record_count = in.u64();
  return header;
}

}  // namespace

DumpHeader read_dump_header(const std::filesystem::path& path) {
  detail::BinaryReader in(path, "dump");
  return parse_header(in);
}

std::vector<LayeredStates> read_dump(const std::filesystem::path& path) {
  detail::BinaryReader in(path, "dump");
  const DumpHeader header = parse_header(in);
  const auto d = static_cast<Eigen::Index>(header.d_model);

  std::vector<LayeredStates> records;
  records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(header.record_count, 1u << 20)));
  for (std::uint64_t r = 0; r < header.record_count; ++r) {
    LayeredStates rec;
    rec.sequence_id = in.string16();
    const std::uint32_t n = in.u32();
    if (n > in.remaining()) {
      in.fail("unexpected end of dump");
    }
    rec.attention_mask.resize(n);
    for (auto& bit : rec.attention_mask) bit = in.u8();
    rec.layer_indices = header.layer_indices;
    rec.states.reserve(header.layer_indices.size());
    for (std::size_t l = 0; l < header.layer_indices.size(); ++l) {
      if (static_cast<std::uint64_t>(n) * header.d_model * sizeof(float) > in.remaining()) {
        in.fail("unexpected end of dump");
      }
      MatrixF m(static_cast<Eigen::Index>(n), d);
      in.f32_array(std::span<float>(m.data(), static_cast<std::size_t>(m.size())));
      rec.states.push_back(std::move(m));
    }
    try {
      rec.validate();
    } catch (const FormatError& e) {
      in.fail(std::string("invalid record in dump: ") + e.what());
    }
    records.push_back(std::move(rec));
  }
  if (!in.at_end()) {
    in.fail("trailing bytes after last dump record");
  }
  return records;
}

Qrels read_qrels_tsv(const std::filesystem::path& path, std::vector<std::string>* warnings) {
  Qrels qrels;
  for_each_line(path, "qrels", [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() < 3) {
      line_error(path, line_no, "expected 3 tab-separated columns (query_id, passage_id, grade)");
    }
    if (line_no == 1 && fields[2] == "score") {
      return;
    }
    if (fields[0].empty() || fields[1].empty()) {
      line_error(path, line_no, "empty id");
    }
    int grade = 0;
    const auto* end = fields[2].data() + fields[2].size();
    const auto [ptr, ec] = std::from_chars(fields[2].data(), end, grade);
    if (ec != std::errc() || ptr != end) {
      line_error(path, line_no, "grade '" + std::string(fields[2]) + "' is not an integer");
    }
    if (grade < 0) {
      line_error(path, line_no, "grade must be non-negative");
    }
    auto& judged = qrels[std::string(fields[0])];
    auto [it, inserted] = judged.insert_or_assign(std::string(fields[1]), grade);
    if (!inserted) {
      const std::string msg = path.string() + ":" + std::to_string(line_no) + ": duplicate pair (" +
                              std::string(fields[0]) + ", " + std::string(fields[1]) + "), keeping last grade";
      if (warnings != nullptr) {
        warnings->push_back(msg);
      } else {
        std::cerr << "warning: " << msg << '\n';
      }
    }
  });
  return qrels;
}

void write_qrels_tsv(const Qrels& qrels, const std::filesystem::path& path) {
  auto out = create_text(path, "qrels");
  for (const auto& [qid, judged] : qrels) {
    for (const auto& [pid, grade] : judged) {
      out << qid << '\t' << pid << '\t' << grade << '\n';
    }
  }
  finish_text(out, path);
}

void TrainExample::validate() const {
  if (query_id.empty()) {
    throw DataError("training example with empty query_id");
  }
  if (positive_ids.empty()) {
    throw DataError("training example '" + query_id + "' has no positives");
  }
  const std::set<std::string> positives(positive_ids.begin(), positive_ids.end());
  for (const auto& neg : negative_ids) {
    if (positives.contains(neg)) {
      throw DataError("training example '" + query_id + "' lists '" + neg + "' as both positive and negative");
    }
  }
}

std::vector<TrainExample> read_train_jsonl(const std::filesystem::path& path) {
  std::vector<TrainExample> examples;
  for_each_line(path, "training examples", [&](std::size_t line_no, std::string_view line) {
    try {
      const auto j = nlohmann::json::parse(line);
      TrainExample ex;
      ex.query_id = j.at("query_id").get<std::string>();
      ex.positive_ids = j.at("positive_ids").get<std::vector<std::string>>();
      if (j.contains("negative_ids")) {
        ex.negative_ids = j.at("negative_ids").get<std::vector<std::string>>();
      }
      ex.validate();
      examples.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      line_error(path, line_no, e.what());
    } catch (const DataError& e) {
      line_error(path, line_no, e.what());
    }
  });
  return examples;
}

void write_train_jsonl(std::span<const TrainExample> examples, const std::filesystem::path& path) {
  auto out = create_text(path, "training examples");
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["query_id"] = ex.query_id;
    j["positive_ids"] = ex.positive_ids;
    j["negative_ids"] = ex.negative_ids;
    out << j.dump() << '\n';
  }
  finish_text(out, path);
}

std::vector<TextRecord> read_text_jsonl(const std::filesystem::path& path) {
  std::vector<TextRecord> records;
  for_each_line(path, "text records", [&](std::size_t line_no, std::string_view line) {
    try {
      const auto j = nlohmann::json::parse(line);
      TextRecord rec{j.at("id").get<std::string>(), j.at("text").get<std::string>()};
      if (rec.id.empty()) line_error(path, line_no, "empty id");
      records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      line_error(path, line_no, e.what());
    }
  });
  return records;
}

void write_text_jsonl(std::span<const TextRecord> records, const std::filesystem::path& path) {
  auto out = create_text(path, "text records");
  for (const auto& rec : records) {
    nlohmann::ordered_json j;
    j["id"] = rec.id;
    j["text"] = rec.text;
    out << j.dump() << '\n';
  }
  finish_text(out, path);
}

std::vector<IdPair> read_pairs_tsv(const std::filesystem::path& path) {
  std::vector<IdPair> pairs;
  for_each_line(path, "pair list", [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() < 2 || fields[0].empty() || fields[1].empty()) {
      line_error(path, line_no, "expected 2 tab-separated ids (query_id, passage_id)");
    }
    pairs.emplace_back(std::string(fields[0]), std::string(fields[1]));
  });
  return pairs;
}

void write_pairs_tsv(std::span<const IdPair> pairs, const std::filesystem::path& path) {
  auto out = create_text(path, "pair list");
  for (const auto& [q, p] : pairs) {
    out << q << '\t' << p << '\n';
  }
  finish_text(out, path);
}

}  // namespace lmort
