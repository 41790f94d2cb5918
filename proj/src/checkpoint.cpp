#include "mgclip/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgclip {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::filesystem::path with_ext(std::filesystem::path p, const char* ext) {
  const auto e = p.extension();
  if (e == ".json" || e == ".bin") p.replace_extension();
  p += ext;
  return p;
}

class Writer {
 public:
  void add(const std::string& name, const Matrix& m) {
    manifest_.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", payload_.size()}});
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) payload_.push_back(m(r, c));
    }
  }
  void add(const std::string& name, const Vector& v) { add(name, Matrix(v)); }

  nlohmann::json manifest_ = nlohmann::json::array();
  std::vector<double> payload_;
};

class Reader {
 public:
  Reader(const nlohmann::json& manifest, std::vector<double> payload) : payload_(std::move(payload)) {
    for (const auto& t : manifest) {
      const std::string name = t.at("name");
      const Index rows = t.at("shape").at(0);
      const Index cols = t.at("shape").at(1);
      const std::size_t offset = t.at("offset");
      if (rows < 0 || cols < 0 || offset + static_cast<std::size_t>(rows * cols) > payload_.size()) {
        throw std::runtime_error("checkpoint: tensor '" + name + "' exceeds the payload");
      }
      Matrix m(rows, cols);
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) m(r, c) = payload_[offset + static_cast<std::size_t>(r * cols + c)];
      }
      tensors_.emplace(name, std::move(m));
    }
  }
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  Matrix matrix(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }
  Vector vector(const std::string& name) const {
    const Matrix m = matrix(name);
    if (m.cols() != 1) throw std::runtime_error("checkpoint: tensor '" + name + "' is not a vector");
    return m.col(0);
  }

 private:
  std::vector<double> payload_;
  std::map<std::string, Matrix> tensors_;
};

void write_layer(Writer& w, const std::string& prefix, const DenseLayer& layer) {
  w.add(prefix + ".weight", layer.weight);
  w.add(prefix + ".bias", layer.bias);
  if (layer.adapter) {
    w.add(prefix + ".adapter.a", layer.adapter->a);
    w.add(prefix + ".adapter.b", layer.adapter->b);
  }
}

DenseLayer read_layer(const Reader& r, const std::string& prefix) {
  DenseLayer layer;
  layer.weight = r.matrix(prefix + ".weight");
  layer.bias = r.vector(prefix + ".bias");
  if (layer.bias.size() != layer.weight.rows()) throw std::runtime_error("checkpoint: bias shape of " + prefix);
  if (r.has(prefix + ".adapter.a")) {
    LowRankAdapter a{r.matrix(prefix + ".adapter.a"), r.matrix(prefix + ".adapter.b")};
    if (a.a.rows() != layer.weight.rows() || a.b.cols() != layer.weight.cols() || a.a.cols() != a.b.rows()) {
      throw std::runtime_error("checkpoint: adapter shape of " + prefix);
    }
    layer.adapter = std::move(a);
  }
  return layer;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& stem) {
  Writer w;
  write_layer(w, "image.hidden", ckpt.encoder.image.hidden);
  write_layer(w, "image.output", ckpt.encoder.image.output);
  write_layer(w, "text.hidden", ckpt.encoder.text.hidden);
  write_layer(w, "text.output", ckpt.encoder.text.output);

  nlohmann::json j;
  j["format"] = "mgclip-checkpoint";
  j["version"] = kCheckpointVersion;
  j["logit_scale"] = ckpt.encoder.logit_scale;
  j["pretrain_epochs"] = ckpt.encoder.pretrain_epochs;
  j["finetune_epochs"] = ckpt.encoder.finetune_epochs;
  if (ckpt.classifier) {
    w.add("classifier.weights", ckpt.classifier->weights);
    j["classifier"] = {{"classes", ckpt.classifier->classes},
                       {"frozen", ckpt.classifier->frozen},
                       {"scale", ckpt.classifier->scale}};
  }
  j["tensors"] = w.manifest_;
  j["metadata"] = ckpt.metadata;

  const auto json_path = with_ext(stem, ".json");
  const auto bin_path = with_ext(stem, ".bin");
  {
    std::ofstream out(bin_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + bin_path.string());
    out.write(reinterpret_cast<const char*>(w.payload_.data()),
              static_cast<std::streamsize>(w.payload_.size() * sizeof(double)));
    if (!out) throw std::runtime_error("write failed: " + bin_path.string());
  }
  std::ofstream out(json_path);
  if (!out) throw std::runtime_error("cannot write " + json_path.string());
  out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto json_path = with_ext(path, ".json");
  const auto bin_path = with_ext(path, ".bin");
  std::ifstream jin(json_path);
  if (!jin) throw std::runtime_error("cannot open " + json_path.string());
  nlohmann::json j;
  try {
    jin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: bad manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != "mgclip-checkpoint") throw std::runtime_error("checkpoint: not a checkpoint manifest");
  if (j.value("version", 0) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");

  std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
  if (!bin) throw std::runtime_error("cannot open " + bin_path.string());
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  if (bytes % sizeof(double) != 0) throw std::runtime_error("checkpoint: payload size is not a multiple of 8");
  std::vector<double> payload(bytes / sizeof(double));
  bin.seekg(0);
  bin.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes));

  Checkpoint ckpt;
  try {
    const Reader r(j.at("tensors"), std::move(payload));
    ckpt.encoder.image = {read_layer(r, "image.hidden"), read_layer(r, "image.output")};
    ckpt.encoder.text = {read_layer(r, "text.hidden"), read_layer(r, "text.output")};
    ckpt.encoder.logit_scale = j.at("logit_scale");
    ckpt.encoder.pretrain_epochs = j.at("pretrain_epochs");
    ckpt.encoder.finetune_epochs = j.at("finetune_epochs");
    if (j.contains("classifier")) {
      CompensationClassifier clf;
      clf.weights = r.matrix("classifier.weights");
      clf.classes = j["classifier"].at("classes").get<std::vector<int>>();
      clf.frozen = j["classifier"].at("frozen").get<std::vector<bool>>();
      clf.scale = j["classifier"].at("scale");
      if (static_cast<Index>(clf.classes.size()) != clf.weights.cols() || clf.frozen.size() != clf.classes.size()) {
        throw std::runtime_error("checkpoint: classifier shape");
      }
      ckpt.classifier = std::move(clf);
    }
    ckpt.metadata = j.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: bad manifest: " + std::string(e.what()));
  }
  return ckpt;
}

}  // namespace mgclip
