#include "refgeo/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "refgeo/errors.hpp"
#include "refgeo/io_util.hpp"

namespace refgeo {

namespace {

constexpr char kMagic[4] = {'T', 'L', 'M', '1'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& is, const std::string& what) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) fail(ErrorKind::format, "truncated checkpoint while reading " + what);
  return v;
}
uint64_t read_u64(std::istream& is, const std::string& what) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) fail(ErrorKind::format, "truncated checkpoint while reading " + what);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::io, "cannot open " + tmp + " for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    const ModelConfig& c = params.config;
    write_u64(os, static_cast<uint64_t>(c.vocab_size));
    write_u64(os, static_cast<uint64_t>(c.d_model));
    write_u64(os, static_cast<uint64_t>(c.n_layers));
    write_u64(os, static_cast<uint64_t>(c.n_heads));
    write_u64(os, static_cast<uint64_t>(c.d_ff));
    write_u64(os, static_cast<uint64_t>(c.max_seq_len));
    write_u64(os, c.rng_seed);
    visit_tensors(params, [&os](const std::string&, const Tensor& t) {
      write_u32(os, static_cast<uint32_t>(t.dims.size()));
      for (uint64_t d : t.dims) write_u64(os, d);
      for (double v : t.data) {
        float f = static_cast<float>(v);
        os.write(reinterpret_cast<const char*>(&f), sizeof(f));
      }
    });
    if (!os) fail(ErrorKind::io, "write failed for " + tmp);
  }
  atomic_rename(tmp, path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open checkpoint " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorKind::format, "bad checkpoint magic in " + path);
  uint32_t version = read_u32(is, "version");
  if (version != kVersion)
    fail(ErrorKind::format, "unsupported checkpoint version " + std::to_string(version));

  ModelConfig c;
  c.vocab_size = static_cast<int>(read_u64(is, "vocab_size"));
  c.d_model = static_cast<int>(read_u64(is, "d_model"));
  c.n_layers = static_cast<int>(read_u64(is, "n_layers"));
  c.n_heads = static_cast<int>(read_u64(is, "n_heads"));
  c.d_ff = static_cast<int>(read_u64(is, "d_ff"));
  c.max_seq_len = static_cast<int>(read_u64(is, "max_seq_len"));
  c.rng_seed = read_u64(is, "rng_seed");
  c.validate();

  // Build expected shapes from the config, then check the file against them.
  ModelParams params;
  params.config = c;
  GradientSet shapes = zero_gradients(c);
  params.token_embedding = std::move(shapes.token_embedding);
  params.position_embedding = std::move(shapes.position_embedding);
  params.layers = std::move(shapes.layers);
  params.final_ln_gain = std::move(shapes.final_ln_gain);
  params.unembedding = std::move(shapes.unembedding);

  visit_tensors(params, [&is, &path](const std::string& name, Tensor& t) {
    uint32_t rank = read_u32(is, name + " rank");
    if (rank != t.dims.size())
      fail(ErrorKind::shape, "checkpoint tensor " + name + " has rank " +
                                 std::to_string(rank) + ", expected " +
                                 std::to_string(t.dims.size()));
    for (size_t i = 0; i < t.dims.size(); ++i) {
      uint64_t d = read_u64(is, name + " dim");
      if (d != t.dims[i])
        fail(ErrorKind::shape, "checkpoint tensor " + name + " dim " + std::to_string(i) +
                                   " is " + std::to_string(d) + ", expected " +
                                   std::to_string(t.dims[i]) + " in " + path);
    }
    for (double& v : t.data) {
      float f = 0.0f;
      is.read(reinterpret_cast<char*>(&f), sizeof(f));
      if (!is) fail(ErrorKind::format, "truncated checkpoint in tensor " + name);
      v = static_cast<double>(f);
    }
  });
  return params;
}

}  // namespace refgeo
