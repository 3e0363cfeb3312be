#include "convreg/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace convreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "raw volume IO assumes a little-endian host");

fs::path payload_path_for(const fs::path& header) {
  fs::path p = header;
  p.replace_extension(".raw");
  return p;
}

void write_bytes(const fs::path& path, const void* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw DataError("write failed: " + path.string());
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open: " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<char> buf(size);
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  if (!in) throw DataError("read failed: " + path.string());
  return buf;
}

void write_header(const fs::path& header, const Geometry& g, const char* dtype) {
  json j;
  j["dims"] = {g.dims.x, g.dims.y, g.dims.z};
  j["spacing"] = {g.spacing.x(), g.spacing.y(), g.spacing.z()};
  j["origin"] = {g.origin.x(), g.origin.y(), g.origin.z()};
  j["dtype"] = dtype;
  j["data"] = payload_path_for(header).filename().string();
  std::ofstream out(header, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + header.string());
  out << j.dump(2) << '\n';
}

struct Header {
  Geometry geometry;
  std::string dtype;
  fs::path payload;
};

Header read_header(const fs::path& header) {
  std::ifstream in(header);
  if (!in) throw DataError("cannot open volume header: " + header.string());
  json j;
  try {
    in >> j;
    Header h;
    const auto dims = j.at("dims").get<std::vector<int>>();
    const auto sp = j.at("spacing").get<std::vector<double>>();
    const auto org = j.at("origin").get<std::vector<double>>();
    if (dims.size() != 3 || sp.size() != 3 || org.size() != 3) throw DataError("dims/spacing/origin need 3 entries");
    h.geometry.dims = {dims[0], dims[1], dims[2]};
    h.geometry.spacing = {sp[0], sp[1], sp[2]};
    h.geometry.origin = {org[0], org[1], org[2]};
    h.geometry.validate();
    h.dtype = j.at("dtype").get<std::string>();
    h.payload = header.parent_path() / j.at("data").get<std::string>();
    return h;
  } catch (const json::exception& e) {
    throw DataError("malformed volume header " + header.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError("invalid volume header " + header.string() + ": " + e.what());
  }
}

}  // namespace

void write_f32le(const fs::path& path, const float* data, std::size_t n) { write_bytes(path, data, n * sizeof(float)); }

std::vector<float> read_f32le(const fs::path& path, std::size_t expected) {
  const auto buf = read_bytes(path);
  if (buf.size() != expected * sizeof(float))
    throw DataError("payload size mismatch in " + path.string());
  std::vector<float> out(expected);
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

void write_volume(const fs::path& header, const Volume& vol) {
  write_header(header, vol.geometry(), "f32le");
  write_f32le(payload_path_for(header), vol.data().data(), vol.size());
}

void write_volume(const fs::path& header, const LabelVolume& labels) {
  write_header(header, labels.geometry(), "u16le");
  write_bytes(payload_path_for(header), labels.data().data(), labels.size() * sizeof(std::uint16_t));
}

Volume read_volume(const fs::path& header) {
  const Header h = read_header(header);
  if (h.dtype != "f32le") throw DataError("expected dtype f32le in " + header.string());
  return Volume(h.geometry, read_f32le(h.payload, h.geometry.count()));
}

LabelVolume read_label_volume(const fs::path& header) {
  const Header h = read_header(header);
  if (h.dtype != "u16le") throw DataError("expected dtype u16le in " + header.string());
  const auto buf = read_bytes(h.payload);
  if (buf.size() != h.geometry.count() * sizeof(std::uint16_t))
    throw DataError("payload size mismatch in " + h.payload.string());
  std::vector<std::uint16_t> data(h.geometry.count());
  std::memcpy(data.data(), buf.data(), buf.size());
  return LabelVolume(h.geometry, std::move(data));
}

}  // namespace convreg
