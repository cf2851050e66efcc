#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>

#include <nlohmann/json.hpp>

#include "v2pe/errors.hpp"
#include "v2pe/tinyformer.hpp"

namespace v2pe {
namespace {

constexpr char kMagic[8] = {'V', '2', 'P', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename U>
void write_pod(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename U>
U read_pod(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw FormatError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = to_json(model.config());
  header["dtype"] = "float32";
  auto tensors = nlohmann::json::array();
  for (const auto& t : model.params().layout().tensors()) {
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  }
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto flat = model.params().flat();
  out.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(float)));
  if (!out) throw FormatError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + " is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = read_pod<std::uint64_t>(in);
  if (len > (std::uint64_t(1) << 30)) throw FormatError("checkpoint header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  Model model(model_config_from_json(header.at("config")));
  const auto& specs = model.params().layout().tensors();
  const auto& listed = header.at("tensors");
  if (listed.size() != specs.size()) throw FormatError("checkpoint tensor table mismatch");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (listed[i].at("name") != specs[i].name || listed[i].at("rows") != specs[i].rows ||
        listed[i].at("cols") != specs[i].cols) {
      throw FormatError("checkpoint tensor " + specs[i].name + " has unexpected shape");
    }
  }
  auto flat = model.params().flat();
  in.read(reinterpret_cast<char*>(flat.data()),
          static_cast<std::streamsize>(flat.size() * sizeof(float)));
  if (!in) throw FormatError("truncated checkpoint payload");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in checkpoint");
  return model;
}

void write_attention_csv(const RowMatrix<float>& attn, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << std::setprecision(9);
  for (Eigen::Index r = 0; r < attn.rows(); ++r) {
    for (Eigen::Index c = 0; c < attn.cols(); ++c) {
      if (c > 0) out << ',';
      out << attn(r, c);
    }
    out << '\n';
  }
}

}  // namespace v2pe
