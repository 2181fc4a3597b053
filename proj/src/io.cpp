#include "dualnet/io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace dualnet::io {

using nlohmann::json;

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

IdxImages read_idx_images(const std::filesystem::path& path) {
  auto b = read_bytes(path);
  if (b.size() < 16) throw IoError(path.string() + ": truncated IDX header");
  if (be32(b, 0) != 0x00000803) throw IoError(path.string() + ": bad magic number for an IDX image file");
  IdxImages img;
  img.count = be32(b, 4);
  img.rows = be32(b, 8);
  img.cols = be32(b, 12);
  const std::size_t need = 16 + img.count * img.rows * img.cols;
  if (b.size() < need) {
    throw IoError(path.string() + ": truncated, expected " + std::to_string(need) + " bytes, found " +
                  std::to_string(b.size()));
  }
  img.pixels.assign(b.begin() + 16, b.begin() + static_cast<long>(need));
  return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  auto b = read_bytes(path);
  if (b.size() < 8) throw IoError(path.string() + ": truncated IDX header");
  if (be32(b, 0) != 0x00000801) throw IoError(path.string() + ": bad magic number for an IDX label file");
  const std::size_t n = be32(b, 4);
  if (b.size() < 8 + n) {
    throw IoError(path.string() + ": truncated, expected " + std::to_string(8 + n) + " bytes, found " +
                  std::to_string(b.size()));
  }
  return std::vector<std::uint8_t>(b.begin() + 8, b.begin() + static_cast<long>(8 + n));
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxImages img = read_idx_images(images);
  auto lab = read_idx_labels(labels);
  if (img.count != lab.size()) {
    throw IoError("image file has " + std::to_string(img.count) + " examples but label file has " +
                  std::to_string(lab.size()));
  }
  Dataset d;
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] / 255.0;
  d.features = Tensor({img.count, img.rows * img.cols}, std::move(v));
  int max_label = -1;
  for (auto y : lab) {
    d.labels.push_back(y);
    max_label = std::max(max_label, static_cast<int>(y));
  }
  d.classes = static_cast<std::size_t>(max_label + 1);
  return d;
}

Dataset load_csv(const std::filesystem::path& path, bool header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Dataset d;
  std::vector<double> values;
  std::size_t width = 0, line_no = 0;
  int max_label = -1;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (header && line_no == 1) continue;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    auto where = [&] { return path.string() + ":" + std::to_string(line_no) + ": "; };
    if (cells.size() < 2) throw IoError(where() + "expected a label and at least one feature");
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw IoError(where() + "ragged row with " + std::to_string(cells.size()) + " fields, expected " +
                    std::to_string(width));
    }
    char* end = nullptr;
    const long label = std::strtol(cells[0].c_str(), &end, 10);
    if (end == cells[0].c_str() || *end != '\0' || label < 0) throw IoError(where() + "invalid label '" + cells[0] + "'");
    d.labels.push_back(static_cast<int>(label));
    max_label = std::max(max_label, static_cast<int>(label));
    for (std::size_t k = 1; k < cells.size(); ++k) {
      const double v = std::strtod(cells[k].c_str(), &end);
      if (end == cells[k].c_str() || *end != '\0' || !std::isfinite(v)) {
        throw IoError(where() + "invalid number '" + cells[k] + "' in column " + std::to_string(k + 1));
      }
      values.push_back(v);
    }
  }
  const std::size_t dim = width == 0 ? 0 : width - 1;
  d.features = Tensor({d.labels.size(), dim}, std::move(values));
  d.classes = static_cast<std::size_t>(max_label + 1);
  return d;
}

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::vector<std::uint8_t> le_bytes(const std::vector<double>& values) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int k = 0; k < 8; ++k) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
  }
  return bytes;
}

}  // namespace

std::string base64_encode(const std::vector<double>& values) {
  const auto bytes = le_bytes(values);
  std::string out;
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    std::uint32_t chunk = std::uint32_t{bytes[i]} << 16;
    if (i + 1 < bytes.size()) chunk |= std::uint32_t{bytes[i + 1]} << 8;
    if (i + 2 < bytes.size()) chunk |= bytes[i + 2];
    out += kAlphabet[(chunk >> 18) & 63];
    out += kAlphabet[(chunk >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(chunk >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kAlphabet[chunk & 63] : '=';
  }
  return out;
}

std::vector<double> base64_decode(const std::string& text) {
  std::array<int, 256> index;
  index.fill(-1);
  for (int i = 0; i < 64; ++i) index[static_cast<unsigned char>(kAlphabet[i])] = i;
  if (text.size() % 4 != 0) throw IoError("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> bytes;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t chunk = 0;
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<std::size_t>(k)];
      int v = 0;
      if (c == '=') {
        ++pad;
      } else {
        v = index[static_cast<unsigned char>(c)];
        if (v < 0 || pad > 0) throw IoError("invalid base64 payload");
      }
      chunk = (chunk << 6) | static_cast<std::uint32_t>(v);
    }
    bytes.push_back(static_cast<std::uint8_t>(chunk >> 16));
    if (pad < 2) bytes.push_back(static_cast<std::uint8_t>(chunk >> 8));
    if (pad < 1) bytes.push_back(static_cast<std::uint8_t>(chunk));
  }
  if (bytes.size() % 8 != 0) throw IoError("base64 payload is not a whole number of f64 values");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t{bytes[i * 8 + static_cast<std::size_t>(k)]} << (8 * k);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

namespace {

json tensor_json(const Tensor& t, Encoding enc) {
  json j;
  j["shape"] = t.shape();
  if (enc == Encoding::base64) {
    j["base64"] = base64_encode(t.values());
  } else {
    j["data"] = t.values();
  }
  return j;
}

Tensor tensor_from(const json& j, const std::string& what) {
  if (!j.is_object() || !j.contains("shape")) throw IoError("parameter '" + what + "' lacks a shape");
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data;
  if (j.contains("data")) {
    data = j.at("data").get<std::vector<double>>();
  } else if (j.contains("base64")) {
    data = base64_decode(j.at("base64").get<std::string>());
  } else {
    throw IoError("parameter '" + what + "' has no data");
  }
  if (data.size() != numel(shape)) throw IoError("parameter '" + what + "' has the wrong number of values");
  return Tensor(std::move(shape), std::move(data));
}

json layer_json(const LayerSpec& spec, Encoding enc) {
  json j;
  j["id"] = spec.id;
  j["inputs"] = spec.inputs;
  j["kind"] = kind_name(spec.kind);
  if (const auto* l = std::get_if<Linear>(&spec.kind)) {
    j["weight"] = tensor_json(l->weight, enc);
    j["bias"] = tensor_json(l->bias, enc);
  } else if (const auto* c = std::get_if<Conv2d>(&spec.kind)) {
    j["weight"] = tensor_json(c->weight, enc);
    j["bias"] = tensor_json(c->bias, enc);
    j["stride"] = c->stride;
    j["pad"] = c->pad;
  } else if (const auto* b = std::get_if<BatchNormFixed>(&spec.kind)) {
    j["gamma"] = tensor_json(b->gamma, enc);
    j["beta"] = tensor_json(b->beta, enc);
    j["mean"] = tensor_json(b->mean, enc);
    j["var"] = tensor_json(b->var, enc);
    j["eps"] = b->eps;
  }
  return j;
}

LayerSpec layer_from(const json& j) {
  LayerSpec spec;
  spec.id = j.at("id").get<int>();
  spec.inputs = j.at("inputs").get<std::vector<int>>();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "Linear") {
    spec.kind = Linear{tensor_from(j.at("weight"), "weight"), tensor_from(j.at("bias"), "bias")};
  } else if (kind == "Conv2d") {
    spec.kind = Conv2d{tensor_from(j.at("weight"), "weight"), tensor_from(j.at("bias"), "bias"),
                       j.at("stride").get<std::size_t>(), j.at("pad").get<std::size_t>()};
  } else if (kind == "ReLU") {
    spec.kind = ReLU{};
  } else if (kind == "HardTanh") {
    spec.kind = HardTanh{};
  } else if (kind == "BatchNormFixed") {
    spec.kind = BatchNormFixed{tensor_from(j.at("gamma"), "gamma"), tensor_from(j.at("beta"), "beta"),
                               tensor_from(j.at("mean"), "mean"), tensor_from(j.at("var"), "var"),
                               j.at("eps").get<double>()};
  } else if (kind == "Add") {
    spec.kind = Add{};
  } else {
    throw IoError("layer " + std::to_string(spec.id) + ": unknown layer kind '" + kind + "'");
  }
  return spec;
}

std::string checksum(const json& layers) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : layers.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string model_to_string(const NetworkGraph& net, const ModelMeta& meta, Encoding encoding) {
  json layers = json::array();
  for (const auto& spec : net.layers()) layers.push_back(layer_json(spec, encoding));
  json j;
  j["version"] = MODEL_FORMAT_VERSION;
  j["input_shape"] = net.input_shape();
  j["layers"] = layers;
  j["checksum"] = checksum(layers);
  j["meta"] = {{"norm", meta.norm}, {"epsilon", meta.epsilon}, {"seed", meta.seed}, {"arch", meta.arch}};
  return j.dump(1) + "\n";
}

LoadedModel model_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("model file is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("version")) throw IoError("unversioned file");
  const int version = j.at("version").get<int>();
  if (version != MODEL_FORMAT_VERSION) {
    throw IoError("unsupported model file version " + std::to_string(version) + " (expected " +
                  std::to_string(MODEL_FORMAT_VERSION) + ")");
  }
  try {
    const json& layers = j.at("layers");
    std::vector<LayerSpec> specs;
    for (const auto& l : layers) specs.push_back(layer_from(l));
    if (j.contains("checksum") && j.at("checksum").get<std::string>() != checksum(layers)) {
      throw IoError("checksum mismatch: model file is corrupted");
    }
    ModelMeta meta;
    if (j.contains("meta")) {
      const json& m = j.at("meta");
      meta.norm = m.value("norm", meta.norm);
      meta.epsilon = m.value("epsilon", meta.epsilon);
      meta.seed = m.value("seed", meta.seed);
      meta.arch = m.value("arch", meta.arch);
    }
    return {NetworkGraph(j.at("input_shape").get<Shape>(), std::move(specs)), meta};
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed model file: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const NetworkGraph& net, const ModelMeta& meta,
                Encoding encoding) {
  write_text(path, model_to_string(net, meta, encoding));
}

LoadedModel load_model(const std::filesystem::path& path) { return model_from_string(read_text(path)); }

void write_certificates(const std::vector<Certificate>& records, const std::filesystem::path& path) {
  std::string out = "example_id,predicted,certified,min_objective,mode\n";
  for (const auto& c : records) {
    out += std::to_string(c.example_id) + "," + std::to_string(c.predicted) + "," + (c.certified ? "1" : "0") + "," +
           fmt("%.9g", c.min_objective) + ",\"" + c.mode + "\"\n";
  }
  write_text(path, out);
}

void write_metrics(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path) {
  std::string out =
      "epoch,eps,train_loss,train_robust_error,test_robust_error,train_standard_error,test_standard_error\n";
  for (const auto& m : metrics) {
    out += std::to_string(m.epoch) + "," + fmt("%.9g", m.eps) + "," + fmt("%.9g", m.train_loss) + "," +
           fmt("%.9g", m.train_robust_error) + "," + fmt("%.9g", m.test_robust_error) + "," +
           fmt("%.9g", m.train_standard_error) + "," + fmt("%.9g", m.test_standard_error) + "\n";
  }
  write_text(path, out);
}

void save_cascade(const std::filesystem::path& dir, const Cascade& cascade, const ModelMeta& meta) {
  std::filesystem::create_directories(dir);
  json stages = json::array();
  for (std::size_t s = 0; s < cascade.stages.size(); ++s) {
    const std::string file = "stage_" + std::to_string(s) + ".json";
    save_model(dir / file, cascade.stages[s], meta);
    stages.push_back({{"file", file},
                      {"eps", cascade.eps.at(s)},
                      {"trained_on", cascade.trained_on.at(s)},
                      {"certified", cascade.certified.at(s)}});
  }
  json manifest{{"version", MODEL_FORMAT_VERSION}, {"stages", stages}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

Cascade load_cascade(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw IoError(std::string("cascade manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("version")) throw IoError("unversioned file");
  Cascade c;
  try {
    for (const auto& s : manifest.at("stages")) {
      c.stages.push_back(load_model(dir / s.at("file").get<std::string>()).net);
      c.eps.push_back(s.at("eps").get<double>());
      c.trained_on.push_back(s.at("trained_on").get<std::size_t>());
      c.certified.push_back(s.at("certified").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed cascade manifest: ") + e.what());
  }
  if (c.stages.empty()) throw IoError("cascade manifest lists no stages");
  return c;
}

}  // namespace dualnet::io
