#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace gnfield {

// Minimal store-only (method 0) ZIP container with fixed timestamps so
// archives are byte-deterministic.

class ZipWriter {
 public:
  void add(const std::string& name, const std::vector<uint8_t>& data) {
    Entry e;
    e.name = name;
    e.offset = static_cast<uint32_t>(buf_.size());
    e.crc = static_cast<uint32_t>(::crc32(0L, data.data(), static_cast<uInt>(data.size())));
    e.size = static_cast<uint32_t>(data.size());
    put_u32(0x04034b50);
    put_u16(20);      // version needed
    put_u16(0);       // flags
    put_u16(0);       // method: stored
    put_u16(0);       // mod time
    put_u16(0x0021);  // mod date: 1980-01-01
    put_u32(e.crc);
    put_u32(e.size);
    put_u32(e.size);
    put_u16(static_cast<uint16_t>(name.size()));
    put_u16(0);
    buf_.insert(buf_.end(), name.begin(), name.end());
    buf_.insert(buf_.end(), data.begin(), data.end());
    entries_.push_back(std::move(e));
  }

  std::vector<uint8_t> finish() {
    const uint32_t cd_start = static_cast<uint32_t>(buf_.size());
    for (const Entry& e : entries_) {
      put_u32(0x02014b50);
      put_u16(20);
      put_u16(20);
      put_u16(0);
      put_u16(0);
      put_u16(0);
      put_u16(0x0021);
      put_u32(e.crc);
      put_u32(e.size);
      put_u32(e.size);
      put_u16(static_cast<uint16_t>(e.name.size()));
      put_u16(0);
      put_u16(0);
      put_u16(0);
      put_u16(0);
      put_u32(0);
      put_u32(e.offset);
      buf_.insert(buf_.end(), e.name.begin(), e.name.end());
    }
    const uint32_t cd_size = static_cast<uint32_t>(buf_.size()) - cd_start;
    put_u32(0x06054b50);
    put_u16(0);
    put_u16(0);
    put_u16(static_cast<uint16_t>(entries_.size()));
    put_u16(static_cast<uint16_t>(entries_.size()));
    put_u32(cd_size);
    put_u32(cd_start);
    put_u16(0);
    return std::move(buf_);
  }

 private:
  struct Entry {
    std::string name;
    uint32_t offset = 0, crc = 0, size = 0;
  };
  std::vector<uint8_t> buf_;
  std::vector<Entry> entries_;

  void put_u16(uint16_t v) {
    buf_.push_back(static_cast<uint8_t>(v));
    buf_.push_back(static_cast<uint8_t>(v >> 8));
  }
  void put_u32(uint32_t v) {
    put_u16(static_cast<uint16_t>(v));
    put_u16(static_cast<uint16_t>(v >> 16));
  }
};

class ZipReader {
 public:
  explicit ZipReader(std::vector<uint8_t> bytes) : buf_(std::move(bytes)) {
    // EOCD: scan backwards for the signature (comments allowed, rare here).
    if (buf_.size() < 22) throw std::runtime_error("zip: too small");
    size_t eocd = buf_.size() - 22;
    while (true) {
      if (u32(eocd) == 0x06054b50) break;
      if (eocd == 0) throw std::runtime_error("zip: no end-of-central-directory");
      --eocd;
    }
    const uint16_t count = u16(eocd + 10);
    size_t pos = u32(eocd + 16);
    for (uint16_t i = 0; i < count; ++i) {
      if (u32(pos) != 0x02014b50) throw std::runtime_error("zip: bad central directory");
      const uint16_t method = u16(pos + 10);
      const uint32_t crc = u32(pos + 16);
      const uint32_t csize = u32(pos + 20);
      const uint32_t usize = u32(pos + 24);
      const uint16_t name_len = u16(pos + 28);
      const uint16_t extra_len = u16(pos + 30);
      const uint16_t comment_len = u16(pos + 32);
      const uint32_t lfh = u32(pos + 42);
      if (method != 0 || csize != usize) throw std::runtime_error("zip: only stored entries");
      Entry e;
      e.name.assign(reinterpret_cast<const char*>(buf_.data() + pos + 46), name_len);
      e.crc = crc;
      e.size = usize;
      // local header: skip its own (possibly different) name/extra lengths
      if (u32(lfh) != 0x04034b50) throw std::runtime_error("zip: bad local header");
      e.data_offset = lfh + 30 + u16(lfh + 26) + u16(lfh + 28);
      entries_.push_back(std::move(e));
      pos += 46u + name_len + extra_len + comment_len;
    }
  }

  bool has(const std::string& name) const { return find(name) >= 0; }

  std::vector<uint8_t> read(const std::string& name) const {
    const int i = find(name);
    if (i < 0) throw std::runtime_error("zip: missing entry " + name);
    const Entry& e = entries_[static_cast<size_t>(i)];
    std::vector<uint8_t> out(buf_.begin() + e.data_offset, buf_.begin() + e.data_offset + e.size);
    const uint32_t crc =
        static_cast<uint32_t>(::crc32(0L, out.data(), static_cast<uInt>(out.size())));
    if (crc != e.crc) throw std::runtime_error("zip: CRC mismatch in " + name);
    return out;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> r;
    for (const Entry& e : entries_) r.push_back(e.name);
    return r;
  }

 private:
  struct Entry {
    std::string name;
    uint32_t crc = 0, size = 0, data_offset = 0;
  };
  std::vector<uint8_t> buf_;
  std::vector<Entry> entries_;

  uint16_t u16(size_t p) const {
    return static_cast<uint16_t>(buf_[p] | (buf_[p + 1] << 8));
  }
  uint32_t u32(size_t p) const {
    return static_cast<uint32_t>(buf_[p]) | (static_cast<uint32_t>(buf_[p + 1]) << 8) |
           (static_cast<uint32_t>(buf_[p + 2]) << 16) | (static_cast<uint32_t>(buf_[p + 3]) << 24);
  }

  int find(const std::string& name) const {
    for (size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return static_cast<int>(i);
    return -1;
  }
};

}  // namespace gnfield
