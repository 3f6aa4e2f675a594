#include "capslu/checkpoint.hpp"

#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>

#include "capslu/binary_io.hpp"

namespace capslu {

namespace {

constexpr std::uint32_t kVersion = 1;

std::array<std::size_t*, 9> config_fields(ModelConfig& c) {
  return {&c.input_dim,      &c.encoder_layers, &c.encoder_units, &c.n_hidden_caps,  &c.hidden_cap_dim,
          &c.output_cap_dim, &c.n_labels,       &c.routing_iters, &c.baseline_hidden};
}

}  // namespace

std::string checkpoint_bytes(const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  io::put_magic(os, ckpt.kind == ModelKind::capsule ? "CSLM" : "CSLB");
  io::put<std::uint32_t>(os, kVersion);
  ModelConfig cfg = ckpt.config;
  for (std::size_t* f : config_fields(cfg)) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(*f));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.norm.dim()));
  for (float v : ckpt.norm.mean) io::put<float>(os, v);
  for (float v : ckpt.norm.stddev) io::put<float>(os, v);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& e : ckpt.params.entries()) {
    io::put_string(os, e.name);
    const Shape& s = e.param.value.shape();
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (float v : e.param.value.data()) io::put<float>(os, v);
  }
  return os.str();
}

Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  Checkpoint ck;
  const std::string magic = io::get_magic(is);
  if (magic == "CSLM") ck.kind = ModelKind::capsule;
  else if (magic == "CSLB") ck.kind = ModelKind::baseline;
  else throw io::FormatError("not a model checkpoint (magic '" + magic + "')");
  if (io::get<std::uint32_t>(is) != kVersion) throw io::FormatError("unsupported checkpoint version");
  for (std::size_t* f : config_fields(ck.config)) *f = io::get<std::uint32_t>(is);
  ck.config.validate();
  const auto dim = io::get<std::uint32_t>(is);
  ck.norm.mean.resize(dim);
  ck.norm.stddev.resize(dim);
  for (float& v : ck.norm.mean) v = io::get<float>(is);
  for (float& v : ck.norm.stddev) v = io::get<float>(is);
  const auto count = io::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::get_string(is);
    const auto rank = io::get<std::uint32_t>(is);
    if (rank > 8) throw io::FormatError("parameter rank out of range");
    Shape s(rank);
    for (std::size_t& d : s) d = io::get<std::uint32_t>(is);
    Tensor<float> t(s);
    for (float& v : t.data()) v = io::get<float>(is);
    ck.params.add(std::move(name), std::move(t));
  }
  const ParamSet<float> expected = init_params<float>(ck.kind, ck.config, 0);
  if (expected.size() != ck.params.size()) throw io::FormatError("checkpoint parameter set does not match its config");
  for (const auto& e : expected.entries()) {
    if (!ck.params.contains(e.name) || ck.params.at(e.name).value.shape() != e.param.value.shape()) {
      throw io::FormatError("checkpoint parameter " + e.name + " missing or misshapen");
    }
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = checkpoint_bytes(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace capslu
