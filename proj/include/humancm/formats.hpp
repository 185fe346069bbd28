#pragma once

// On-disk formats. All integers are little-endian uint32, all reals
// little-endian IEEE-754 binary64, matrices frame-major (row-major).
//
// Motion container ("HCM1"):
//   "HCM1" | record count | records...
//   dataset record: J | H | F | (H+F) * 3J reals
//   sample record:  J | 0 | F | parent item index | F * 3J reals
//
// Checkpoint ("HCMK"):
//   "HCMK" | version | header length | header text (key=value lines)
//   | array count | arrays...
//   array: name length | name bytes | rows | cols | rows * cols reals
// The header carries kind, epoch and the full run configuration; arrays are
// the latent normalisation statistics followed by the parameter arrays in
// canonical order ("online." / "target." prefixed for students).

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "humancm/config.hpp"
#include "humancm/consistency.hpp"
#include "humancm/latent.hpp"

namespace humancm {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
  }
  void raw(const std::string& s) { bytes_.append(s); }
  void matrix(const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = f64();
    return m;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated file");
  }
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace io

// ---- motion container -------------------------------------------------------

inline std::string encode_dataset_file(const std::vector<PredictionTask>& tasks) {
  io::Writer w;
  w.raw("HCM1");
  w.u32(static_cast<std::uint32_t>(tasks.size()));
  for (const auto& t : tasks) {
    w.u32(static_cast<std::uint32_t>(t.joints()));
    w.u32(static_cast<std::uint32_t>(t.history_frames()));
    w.u32(static_cast<std::uint32_t>(t.future_frames()));
    w.matrix(t.full().coords);
  }
  return w.bytes();
}

/// K sampled futures per item; `samples[i]` belong to item i.
inline std::string encode_samples_file(const std::vector<std::vector<Matrix>>& samples, int joints) {
  io::Writer w;
  w.raw("HCM1");
  std::size_t count = 0;
  for (const auto& s : samples) count += s.size();
  w.u32(static_cast<std::uint32_t>(count));
  for (std::size_t item = 0; item < samples.size(); ++item) {
    for (const auto& m : samples[item]) {
      w.u32(static_cast<std::uint32_t>(joints));
      w.u32(0);
      w.u32(static_cast<std::uint32_t>(m.rows()));
      w.u32(static_cast<std::uint32_t>(item));
      w.matrix(m);
    }
  }
  return w.bytes();
}

struct MotionRecord {
  int joints = 0;
  int history = 0;  // 0 marks a sample record
  int future = 0;
  std::uint32_t parent = 0;
  Matrix coords;
};

inline std::vector<MotionRecord> decode_motion_file(const std::string& bytes, const std::string& what) {
  io::Reader r(bytes, what);
  if (r.raw(4) != "HCM1") throw IoError(what + ": not an HCM1 container");
  const std::uint32_t count = r.u32();
  std::vector<MotionRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    MotionRecord rec;
    rec.joints = static_cast<int>(r.u32());
    rec.history = static_cast<int>(r.u32());
    rec.future = static_cast<int>(r.u32());
    if (rec.joints < 1 || rec.future < 1) throw IoError(what + ": malformed record header");
    if (rec.history == 0) rec.parent = r.u32();
    rec.coords = r.matrix(rec.history + rec.future, 3 * rec.joints);
    out.push_back(std::move(rec));
  }
  if (!r.done()) throw IoError(what + ": trailing bytes after last record");
  return out;
}

inline std::vector<PredictionTask> read_dataset(const std::string& path) {
  std::vector<PredictionTask> tasks;
  for (auto& rec : decode_motion_file(io::read_file(path), path)) {
    if (rec.history == 0) throw ArtifactMismatch(path + ": holds sample records, expected a dataset");
    MotionSequence seq{rec.joints, std::move(rec.coords)};
    seq.validate();
    tasks.push_back(split_history_future(seq, rec.history, rec.future));
  }
  return tasks;
}

/// Sample sets grouped by parent index; the item count is one past the
/// largest parent and every item must receive the same number of samples.
inline std::vector<std::vector<Matrix>> read_samples(const std::string& path, int* joints = nullptr) {
  std::vector<std::vector<Matrix>> out;
  for (auto& rec : decode_motion_file(io::read_file(path), path)) {
    if (rec.history != 0) throw ArtifactMismatch(path + ": holds dataset records, expected samples");
    if (joints != nullptr) *joints = rec.joints;
    if (rec.parent >= out.size()) out.resize(rec.parent + 1);
    out[rec.parent].push_back(std::move(rec.coords));
  }
  if (out.empty()) throw ArtifactMismatch(path + ": no sample records");
  for (const auto& s : out)
    if (s.size() != out.front().size())
      throw ArtifactMismatch(path + ": test items received unequal sample counts");
  return out;
}

/// Train / test split of a dataset file: the last `n_test` records are test items.
struct DatasetSplit {
  std::vector<PredictionTask> train;
  std::vector<PredictionTask> test;
};

inline DatasetSplit split_dataset(std::vector<PredictionTask> all, int n_test) {
  if (n_test < 1 || static_cast<std::size_t>(n_test) >= all.size())
    throw ArtifactMismatch("dataset has " + std::to_string(all.size()) +
                           " records, too few for " + std::to_string(n_test) + " test items");
  DatasetSplit s;
  const auto cut = all.end() - n_test;
  s.train.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(cut));
  s.test.assign(std::make_move_iterator(cut), std::make_move_iterator(all.end()));
  return s;
}

// ---- checkpoints ------------------------------------------------------------

enum class CheckpointKind { Teacher, Student };

inline std::string kind_name(CheckpointKind k) { return k == CheckpointKind::Teacher ? "teacher" : "student"; }

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  CheckpointKind kind = CheckpointKind::Teacher;
  int epoch = 0;
  RunConfig config;
  LatentCodec codec;
  DenoiserParams online;  // the teacher for kind == Teacher
  DenoiserParams target;  // unused for teachers

  StudentParams student() const { return {online, target}; }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  io::Writer w;
  w.raw("HCMK");
  w.u32(Checkpoint::kVersion);
  const std::string header = "kind=" + kind_name(ck.kind) + "\nepoch=" + std::to_string(ck.epoch) + "\n" +
                             to_config_text(ck.config);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header);

  std::vector<std::pair<std::string, const Matrix*>> arrays{{"norm.y_mean", &ck.codec.y_mean},
                                                            {"norm.y_std", &ck.codec.y_std},
                                                            {"norm.c_mean", &ck.codec.c_mean},
                                                            {"norm.c_std", &ck.codec.c_std}};
  const ParamLayout layout(ck.online.arch);
  const auto add_set = [&](const std::string& prefix, const DenoiserParams& p) {
    for (std::size_t i = 0; i < layout.size(); ++i) arrays.emplace_back(prefix + layout.specs[i].name, &p.arrays[i]);
  };
  if (ck.kind == CheckpointKind::Teacher) {
    add_set("", ck.online);
  } else {
    add_set("online.", ck.online);
    add_set("target.", ck.target);
  }
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, m] : arrays) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(m->rows()));
    w.u32(static_cast<std::uint32_t>(m->cols()));
    w.matrix(*m);
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what) {
  io::Reader r(bytes, what);
  if (r.raw(4) != "HCMK") throw IoError(what + ": not a checkpoint");
  if (const auto v = r.u32(); v != Checkpoint::kVersion)
    throw ArtifactMismatch(what + ": unsupported checkpoint version " + std::to_string(v));
  ConfigMap header = parse_config_text(r.raw(r.u32()));
  Checkpoint ck;
  const std::string kind = header["kind"];
  if (kind == "teacher") ck.kind = CheckpointKind::Teacher;
  else if (kind == "student") ck.kind = CheckpointKind::Student;
  else throw ArtifactMismatch(what + ": unknown checkpoint kind '" + kind + "'");
  ck.epoch = detail::parse_int<int>("epoch", header["epoch"]);
  header.erase("kind");
  header.erase("epoch");
  try {
    ck.config = run_config_from_map(header);
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw ArtifactMismatch(what + ": invalid embedded config: " + e.what());
  }

  const ArchConfig arch = ck.config.arch();
  const ParamLayout layout(arch);
  std::vector<std::pair<std::string, Matrix>> arrays;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.raw(r.u32());
    const auto rows = static_cast<Eigen::Index>(r.u32());
    const auto cols = static_cast<Eigen::Index>(r.u32());
    arrays.emplace_back(std::move(name), r.matrix(rows, cols));
  }
  if (!r.done()) throw IoError(what + ": trailing bytes after last array");

  std::size_t next = 0;
  const auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (next >= arrays.size() || arrays[next].first != name)
      throw ArtifactMismatch(what + ": expected array '" + name + "'");
    Matrix& m = arrays[next].second;
    if (m.rows() != rows || m.cols() != cols)
      throw ArtifactMismatch(what + ": array '" + name + "' has the wrong shape");
    ++next;
    return std::move(m);
  };
  const RunConfig& c = ck.config;
  ck.codec = make_latent_codec(c.data.history, c.data.future, c.keep);
  ck.codec.y_mean = take("norm.y_mean", c.keep, c.channels());
  ck.codec.y_std = take("norm.y_std", c.keep, c.channels());
  ck.codec.c_mean = take("norm.c_mean", c.keep, c.channels());
  ck.codec.c_std = take("norm.c_std", c.keep, c.channels());
  const auto read_set = [&](const std::string& prefix) {
    DenoiserParams p{arch, {}};
    for (const auto& spec : layout.specs) p.arrays.push_back(take(prefix + spec.name, spec.rows, spec.cols));
    return p;
  };
  if (ck.kind == CheckpointKind::Teacher) {
    ck.online = read_set("");
    ck.target = ck.online;
  } else {
    ck.online = read_set("online.");
    ck.target = read_set("target.");
  }
  if (next != arrays.size()) throw ArtifactMismatch(what + ": unexpected extra arrays");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file(path), path);
}

}  // namespace humancm
