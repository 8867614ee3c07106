#include "fedmae/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "fedmae/config.hpp"
#include "fedmae/error.hpp"

namespace fedmae {
namespace {

constexpr const char* kMagic = "fedmae-checkpoint 1";

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << kMagic << '\n';
  for (const auto& [k, v] : ckpt.metadata) {
    require(k.find_first_of("=\n ") == std::string::npos && v.find('\n') == std::string::npos,
            "checkpoint metadata must be single-line key=value");
    out << k << '=' << v << '\n';
  }
  std::size_t offset = 0;
  for (const auto& [name, p] : ckpt.params) {
    out << "param " << name << ' ' << p.value.ndim();
    for (auto d : p.value.shape()) out << ' ' << d;
    out << ' ' << offset << ' ' << p.value.size() << '\n';
    offset += 4 * p.value.size();
  }
  out << "end\n";
  for (const auto& [_, p] : ckpt.params)
    for (double v : p.value.values()) detail::put_f32(out, v);
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic)
    throw IoError(path.string() + ": not a checkpoint (bad header)");

  struct Section {
    std::string name;
    Shape shape;
    std::size_t offset = 0, count = 0;
  };
  Checkpoint ckpt;
  std::vector<Section> sections;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.rfind("param ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      Section s;
      std::size_t ndim = 0;
      ls >> s.name >> ndim;
      s.shape.resize(ndim);
      for (auto& d : s.shape) ls >> d;
      ls >> s.offset >> s.count;
      if (!ls || s.count != shape_size(s.shape))
        throw IoError(path.string() + ": malformed param line: " + line);
      sections.push_back(std::move(s));
    } else {
      auto eq = line.find('=');
      if (eq == std::string::npos) throw IoError(path.string() + ": malformed line: " + line);
      ckpt.metadata[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  if (!ended) throw IoError(path.string() + ": manifest has no end marker");

  std::size_t expected = 0;
  for (const auto& s : sections) {
    if (s.offset != expected) throw IoError(path.string() + ": section offsets are not contiguous");
    Tensor t(s.shape);
    for (auto& v : t.values())
      if (!detail::get_f32(in, v)) throw IoError(path.string() + ": blob is truncated");
    ckpt.params.add(s.name, std::move(t));
    expected += 4 * s.count;
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw IoError(path.string() + ": trailing bytes after the blob");
  return ckpt;
}

void put_geometry(std::map<std::string, std::string>& meta, const ImageGeometry& geo) {
  meta["channels"] = std::to_string(geo.channels);
  meta["height"] = std::to_string(geo.height);
  meta["width"] = std::to_string(geo.width);
  meta["patch"] = std::to_string(geo.patch);
}

std::size_t meta_size(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw IoError("checkpoint metadata lacks '" + key + "'");
  return static_cast<std::size_t>(parse_int(it->second, "checkpoint " + key));
}

ImageGeometry get_geometry(const std::map<std::string, std::string>& meta) {
  ImageGeometry geo{meta_size(meta, "channels"), meta_size(meta, "height"),
                    meta_size(meta, "width"), meta_size(meta, "patch")};
  geo.validate();
  return geo;
}

void save_mae(const std::filesystem::path& path, const MaeModel& model) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "mae";
  put_geometry(ckpt.metadata, model.geometry);
  ckpt.metadata["d_enc"] = std::to_string(model.dims.d_enc);
  ckpt.metadata["d_dec"] = std::to_string(model.dims.d_dec);
  ckpt.metadata["heads"] = std::to_string(model.dims.heads);
  ckpt.metadata["mlp_ratio"] = std::to_string(model.dims.mlp_ratio);
  ckpt.metadata["depth"] = std::to_string(model.dims.depth);
  ckpt.params = model.params;
  save_checkpoint(path, ckpt);
}

MaeModel load_mae(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  auto kind = ckpt.metadata.find("kind");
  if (kind == ckpt.metadata.end() || kind->second != "mae")
    throw IoError(path.string() + ": not an MAE checkpoint");
  MaeModel m;
  m.geometry = get_geometry(ckpt.metadata);
  m.dims.d_enc = meta_size(ckpt.metadata, "d_enc");
  m.dims.d_dec = meta_size(ckpt.metadata, "d_dec");
  m.dims.heads = meta_size(ckpt.metadata, "heads");
  m.dims.mlp_ratio = meta_size(ckpt.metadata, "mlp_ratio");
  m.dims.depth = meta_size(ckpt.metadata, "depth");
  m.dims.validate();
  m.params = std::move(ckpt.params);
  // Shape audit against a freshly built model of the same dims.
  RngStream probe(0);
  const MaeModel reference = init_mae(m.geometry, m.dims, probe);
  require(reference.params.names() == m.params.names(),
          path.string() + ": parameter set does not match its declared dims");
  for (const auto& [name, p] : reference.params)
    require(p.value.shape() == m.params.at(name).value.shape(),
            path.string() + ": shape mismatch for " + name);
  return m;
}

}  // namespace fedmae
