#include "t3/tar.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace t3 {

namespace {

constexpr std::size_t kBlock = 512;
using Header = std::array<char, kBlock>;

void put_octal(char* field, std::size_t width, std::uint64_t value) {
  // width includes the terminating NUL.
  std::snprintf(field, width, "%0*llo", static_cast<int>(width - 1), static_cast<unsigned long long>(value));
}

unsigned header_checksum(const Header& h) {
  unsigned sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) {
    sum += (i >= 148 && i < 156) ? static_cast<unsigned>(' ') : static_cast<unsigned char>(h[i]);
  }
  return sum;
}

std::optional<std::uint64_t> parse_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  bool any = false;
  for (std::size_t i = 0; i < width; ++i) {
    const char c = field[i];
    if (c == '\0' || c == ' ') {
      if (any) break;
      continue;
    }
    if (c < '0' || c > '7') return std::nullopt;
    v = v * 8 + static_cast<std::uint64_t>(c - '0');
    any = true;
  }
  if (!any) return std::nullopt;
  return v;
}

}  // namespace

TarWriter::TarWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open '" + path + "' for writing");
}

TarWriter::~TarWriter() {
  if (!finished_) {
    try {
      finish();
    } catch (...) {
    }
  }
}

void TarWriter::add(const std::string& name, std::string_view data) {
  if (finished_) throw std::logic_error("tar archive already finished");
  if (name.empty() || name.size() > 99) throw std::invalid_argument("tar member name must be 1..99 chars: " + name);
  Header h{};
  std::memcpy(h.data(), name.data(), name.size());
  put_octal(h.data() + 100, 8, 0644);
  put_octal(h.data() + 108, 8, 0);
  put_octal(h.data() + 116, 8, 0);
  put_octal(h.data() + 124, 12, data.size());
  put_octal(h.data() + 136, 12, 0);
  h[156] = '0';
  std::memcpy(h.data() + 257, "ustar", 6);
  std::memcpy(h.data() + 263, "00", 2);
  std::snprintf(h.data() + 148, 8, "%06o", header_checksum(h));
  h[155] = ' ';
  out_.write(h.data(), kBlock);
  out_.write(data.data(), static_cast<std::streamsize>(data.size()));
  const std::size_t pad = (kBlock - data.size() % kBlock) % kBlock;
  static const std::array<char, kBlock> zeros{};
  out_.write(zeros.data(), static_cast<std::streamsize>(pad));
  if (!out_) throw std::runtime_error("write failed for '" + path_ + "'");
  ++members_;
}

void TarWriter::finish() {
  if (finished_) return;
  finished_ = true;
  static const std::array<char, 2 * kBlock> zeros{};
  out_.write(zeros.data(), zeros.size());
  out_.close();
  if (!out_) throw std::runtime_error("write failed for '" + path_ + "'");
}

TarReader::TarReader(const std::string& path) : in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("cannot open '" + path + "'");
}

std::optional<TarMember> TarReader::next() {
  while (!done_) {
    Header h{};
    in_.read(h.data(), kBlock);
    if (in_.gcount() != static_cast<std::streamsize>(kBlock)) {
      if (in_.gcount() != 0) ++corrupt_;
      done_ = true;
      break;
    }
    if (std::all_of(h.begin(), h.end(), [](char c) { return c == '\0'; })) {
      done_ = true;
      break;
    }
    const auto stored = parse_octal(h.data() + 148, 8);
    const auto size = parse_octal(h.data() + 124, 12);
    if (!stored || !size || *stored != header_checksum(h)) {
      // Scan forward block by block; a damaged member counts once.
      if (!resyncing_) ++corrupt_;
      resyncing_ = true;
      continue;
    }
    resyncing_ = false;
    TarMember m;
    m.name.assign(h.data(), strnlen(h.data(), 100));
    m.data.resize(*size);
    in_.read(m.data.data(), static_cast<std::streamsize>(*size));
    if (static_cast<std::uint64_t>(in_.gcount()) != *size) {
      ++corrupt_;
      done_ = true;
      break;
    }
    const std::size_t pad = (kBlock - *size % kBlock) % kBlock;
    in_.ignore(static_cast<std::streamsize>(pad));
    const char type = h[156];
    if (type != '0' && type != '\0') continue;  // directories, links, pax headers
    return m;
  }
  return std::nullopt;
}

std::vector<TarMember> read_tar(const std::string& path, std::size_t* corrupt) {
  TarReader r(path);
  std::vector<TarMember> out;
  while (auto m = r.next()) out.push_back(std::move(*m));
  if (corrupt) *corrupt = r.corrupt();
  return out;
}

}  // namespace t3
