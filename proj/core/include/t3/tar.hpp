#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace t3 {

struct TarMember {
  std::string name;
  std::string data;
};

/// Minimal POSIX ustar writer: regular files only, fixed mtime/uid/gid so
/// identical inputs give identical archives.
class TarWriter {
 public:
  explicit TarWriter(const std::string& path);
  ~TarWriter();
  TarWriter(const TarWriter&) = delete;
  TarWriter& operator=(const TarWriter&) = delete;

  void add(const std::string& name, std::string_view data);
  /// Writes the end-of-archive marker and closes the file.
  void finish();
  std::size_t members() const { return members_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::size_t members_ = 0;
  bool finished_ = false;
};

/// Sequential reader. Members with a bad header checksum or a truncated
/// payload are skipped and counted.
class TarReader {
 public:
  explicit TarReader(const std::string& path);

  std::optional<TarMember> next();
  std::size_t corrupt() const { return corrupt_; }

 private:
  std::ifstream in_;
  std::size_t corrupt_ = 0;
  bool done_ = false;
  bool resyncing_ = false;
};

std::vector<TarMember> read_tar(const std::string& path, std::size_t* corrupt = nullptr);

}  // namespace t3
