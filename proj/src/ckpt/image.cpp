#include "crum/ckpt/image.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <thread>

#include "crum/ckpt/codec.hpp"
#include "crum/env.hpp"

namespace crum::ckpt {

static_assert(std::endian::native == std::endian::little, "image encoding assumes a little-endian host");

namespace {

constexpr size_t kHeaderBytes = 16;
constexpr size_t kMetaBytes = 32;
constexpr size_t kRegionEntryBytes = 32;
constexpr size_t kWriteSlice = size_t{1} << 20;

uLong crc_of(std::span<const std::byte> bytes, uLong crc = crc32(0L, Z_NULL, 0)) {
  while (!bytes.empty()) {
    const auto n = static_cast<uInt>(std::min<size_t>(bytes.size(), size_t{1} << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), n);
    bytes = bytes.subspan(n);
  }
  return crc;
}

template <class T>
void put(std::vector<std::byte>& out, T value) {
  const auto* p = reinterpret_cast<const std::byte*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
std::span<const std::byte> bytes_of(const T& value) {
  return {reinterpret_cast<const std::byte*>(&value), sizeof(T)};
}

class FileSink {
 public:
  FileSink(const std::string& path, double throttle_mbps) : path_(path), rate_(throttle_mbps * 1e6) {
    fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) {
      fail("open");
    }
    crc_ = crc32(0L, Z_NULL, 0);
  }
  ~FileSink() {
    if (fd_ >= 0) {
      ::close(fd_);
    }
  }

  void write(std::span<const std::byte> data) {
    crc_ = crc_of(data, crc_);
    crc_len_ += data.size();
    write_uncounted(data);
  }

  void write_uncounted(std::span<const std::byte> data) {
    while (!data.empty()) {
      const size_t n = std::min(data.size(), kWriteSlice);
      throttle(n);
      ssize_t w = ::write(fd_, data.data(), n);
      if (w < 0) {
        if (errno == EINTR) {
          continue;
        }
        fail("write");
      }
      if (w == 0) {
        errno = ENOSPC;
        fail("write");
      }
      data = data.subspan(static_cast<size_t>(w));
      offset_ += static_cast<uint64_t>(w);
      written_ += static_cast<uint64_t>(w);
    }
  }

  void patch(uint64_t pos, std::span<const std::byte> data) {
    if (pwrite(fd_, data.data(), data.size(), static_cast<off_t>(pos)) != static_cast<ssize_t>(data.size())) {
      fail("pwrite");
    }
  }

  // Restart the running checksum; returns the one just ended with its length.
  std::pair<uLong, uint64_t> cut_crc() {
    auto out = std::make_pair(crc_, crc_len_);
    crc_ = crc32(0L, Z_NULL, 0);
    crc_len_ = 0;
    return out;
  }

  void finish(bool sync) {
    if (sync && fsync(fd_) != 0 && errno != EINVAL && errno != EROFS) {
      fail("fsync");
    }
    if (::close(fd_) != 0) {
      fd_ = -1;
      fail("close");
    }
    fd_ = -1;
  }

  uint64_t offset() const { return offset_; }

 private:
  void throttle(size_t n) {
    if (rate_ <= 0) {
      return;
    }
    const auto now = std::chrono::steady_clock::now();
    if (written_ == 0) {
      start_ = now;
    }
    const auto due = start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                  std::chrono::duration<double>(static_cast<double>(written_ + n) / rate_));
    if (due > now) {
      std::this_thread::sleep_until(due);
    }
  }

  [[noreturn]] void fail(const char* what) {
    throw_errno(Errc::WriteFailed, std::string(what) + " " + path_);
  }

  std::string path_;
  int fd_ = -1;
  double rate_;
  uint64_t offset_ = 0;
  uint64_t written_ = 0;
  std::chrono::steady_clock::time_point start_;
  uLong crc_;
  uint64_t crc_len_ = 0;
};

void write_section(FileSink& sink, SectionTag tag, std::span<const std::byte> body) {
  sink.write(bytes_of(static_cast<uint32_t>(tag)));
  sink.write(bytes_of(static_cast<uint64_t>(body.size())));
  sink.write(body);
  sink.write(bytes_of(static_cast<uint32_t>(crc_of(body))));
}

struct Chunk {
  std::span<const std::byte> raw;
  std::vector<std::byte> encoded;
};

}  // namespace

double throttle_from_env() {
  auto v = env::get(env::kStoreThrottleMbps);
  if (!v || v->empty()) {
    return 0;
  }
  try {
    return std::stod(*v);
  } catch (const std::exception&) {
    throw Error(Errc::InvalidArgument, "CRUM_STORE_THROTTLE_MBPS is not a number: " + *v);
  }
}

uint64_t write_image(const std::string& path, const ImageInput& in, const WriteOptions& options) {
  if (in.payloads.size() != in.regions.size()) {
    throw Error(Errc::InvalidArgument, "one payload per region required");
  }
  FileSink sink(path, options.throttle_mbps);

  std::vector<std::byte> header;
  header.insert(header.end(), reinterpret_cast<const std::byte*>(kImageMagic),
                reinterpret_cast<const std::byte*>(kImageMagic) + 4);
  put(header, kFormatVersion);
  put(header, static_cast<uint8_t>(in.codec));
  put(header, uint8_t{0});
  put(header, uint16_t{0});
  put(header, uint32_t{5});
  sink.write(header);

  std::vector<std::byte> meta;
  put(meta, in.meta.page_size);
  put(meta, in.meta.arena_capacity);
  put(meta, in.meta.shadow_base);
  put(meta, in.meta.mode);
  meta.resize(kMetaBytes, std::byte{0});
  write_section(sink, SectionTag::Meta, meta);

  std::vector<std::byte> replay;
  put(replay, static_cast<uint64_t>(in.replay.size()));
  for (const auto& rec : in.replay) {
    put(replay, rec);
  }
  write_section(sink, SectionTag::Replay, replay);

  std::vector<std::byte> regions;
  put(regions, static_cast<uint32_t>(in.regions.size()));
  put(regions, uint32_t{0});
  for (const auto& r : in.regions) {
    put(regions, r.id);
    put(regions, r.kind);
    regions.resize(regions.size() + 7, std::byte{0});
    put(regions, r.length);
    put(regions, r.shadow);
  }
  write_section(sink, SectionTag::Regions, regions);

  // Payload: body length is patched in once known; the whole-file CRC is
  // stitched together around it.
  sink.write(bytes_of(static_cast<uint32_t>(SectionTag::Payload)));
  const auto [crc_head, len_head] = sink.cut_crc();
  const uint64_t len_pos = sink.offset();
  sink.write_uncounted(bytes_of(uint64_t{0}));
  uLong body_crc = crc32(0L, Z_NULL, 0);
  uint64_t body_len = 0;
  auto emit = [&](std::span<const std::byte> bytes) {
    sink.write(bytes);
    body_crc = crc_of(bytes, body_crc);
    body_len += bytes.size();
  };

  std::vector<Chunk> chunks;
  for (size_t i = 0; i < in.regions.size(); ++i) {
    auto payload = in.payloads[i];
    if (payload.size() != in.regions[i].length) {
      throw Error(Errc::InvalidArgument, "payload length differs from region length");
    }
    for (uint64_t off = 0; off < payload.size(); off += kChunkBytes) {
      chunks.push_back({payload.subspan(off, std::min<uint64_t>(kChunkBytes, payload.size() - off)), {}});
    }
  }
  const size_t workers = std::max(1u, in.workers);
  const size_t batch = in.codec == Codec::Raw ? 1 : workers * 2;
  for (size_t start = 0; start < chunks.size(); start += batch) {
    const size_t end = std::min(chunks.size(), start + batch);
    if (in.codec != Codec::Raw) {
      if (workers == 1) {
        for (size_t i = start; i < end; ++i) {
          chunks[i].encoded = encode_chunk(in.codec, chunks[i].raw);
        }
      } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (size_t w = 0; w < workers; ++w) {
          pool.emplace_back([&, w] {
            try {
              for (size_t i = start + w; i < end; i += workers) {
                chunks[i].encoded = encode_chunk(in.codec, chunks[i].raw);
              }
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        }
        for (auto& t : pool) {
          t.join();
        }
        for (auto& e : errors) {
          if (e) {
            std::rethrow_exception(e);
          }
        }
      }
    }
    for (size_t i = start; i < end; ++i) {
      auto data = in.codec == Codec::Raw ? chunks[i].raw : std::span<const std::byte>(chunks[i].encoded);
      emit(bytes_of(static_cast<uint32_t>(chunks[i].raw.size())));
      emit(bytes_of(static_cast<uint32_t>(data.size())));
      emit(data);
      chunks[i].encoded = {};
    }
  }
  sink.write(bytes_of(static_cast<uint32_t>(body_crc)));

  write_section(sink, SectionTag::AppState, in.app_state);

  const auto [crc_tail, len_tail] = sink.cut_crc();
  const uint64_t len_field = body_len;
  sink.patch(len_pos, bytes_of(len_field));
  uLong whole = crc32_combine(crc_head, crc_of(bytes_of(len_field)), 8);
  whole = crc32_combine(whole, crc_tail, static_cast<z_off_t>(len_tail));
  (void)len_head;
  sink.write_uncounted(bytes_of(static_cast<uint32_t>(whole)));
  const uint64_t total = sink.offset();
  sink.finish(options.sync);
  return total;
}

namespace {

class Mapped {
 public:
  explicit Mapped(const std::string& path) {
    int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) {
      throw_errno(Errc::FormatError, "open " + path);
    }
    struct stat st {};
    if (fstat(fd, &st) != 0) {
      ::close(fd);
      throw_errno(Errc::FormatError, "stat " + path);
    }
    size_ = static_cast<size_t>(st.st_size);
    if (size_ > 0) {
      void* p = mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
      if (p == MAP_FAILED) {
        ::close(fd);
        throw_errno(Errc::FormatError, "mmap " + path);
      }
      data_ = static_cast<const std::byte*>(p);
    }
    ::close(fd);
  }
  ~Mapped() {
    if (data_ != nullptr) {
      munmap(const_cast<std::byte*>(data_), size_);
    }
  }
  std::span<const std::byte> bytes() const { return {data_, size_}; }

 private:
  const std::byte* data_ = nullptr;
  size_t size_ = 0;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
    return value;
  }

  std::span<const std::byte> take(uint64_t n) {
    if (n > bytes_.size() - pos_) {
      throw Error(Errc::FormatError, "image section runs past its end");
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::byte> bytes_;
  size_t pos_ = 0;
};

std::span<const std::byte> read_section(Reader& file, SectionTag tag) {
  const auto got = file.get<uint32_t>();
  if (got != static_cast<uint32_t>(tag)) {
    throw Error(Errc::FormatError, "unexpected section tag " + std::to_string(got));
  }
  const auto len = file.get<uint64_t>();
  auto body = file.take(len);
  const auto crc = file.get<uint32_t>();
  if (crc != static_cast<uint32_t>(crc_of(body))) {
    throw Error(Errc::CrcMismatch, "section " + std::to_string(got) + " checksum mismatch");
  }
  return body;
}

}  // namespace

ImageContents read_image(const std::string& path) {
  Mapped file(path);
  auto all = file.bytes();
  if (all.size() < kHeaderBytes + 4) {
    throw Error(Errc::CrcMismatch, "image " + path + " is truncated (" + std::to_string(all.size()) + " bytes)");
  }
  uint32_t trailer;
  std::memcpy(&trailer, all.data() + all.size() - 4, 4);
  if (trailer != static_cast<uint32_t>(crc_of(all.first(all.size() - 4)))) {
    throw Error(Errc::CrcMismatch, "image " + path + " whole-file checksum mismatch");
  }
  Reader r(all.first(all.size() - 4));
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kImageMagic, 4) != 0) {
    throw Error(Errc::FormatError, path + " is not a checkpoint image");
  }
  ImageContents out;
  if (auto version = r.get<uint32_t>(); version != kFormatVersion) {
    throw Error(Errc::FormatError, "unsupported image format version " + std::to_string(version));
  }
  const auto codec = r.get<uint8_t>();
  if (codec > static_cast<uint8_t>(Codec::Lz4)) {
    throw Error(Errc::FormatError, "unknown codec " + std::to_string(codec));
  }
  out.codec = static_cast<Codec>(codec);
  r.take(3);
  if (auto sections = r.get<uint32_t>(); sections != 5) {
    throw Error(Errc::FormatError, "expected 5 sections, found " + std::to_string(sections));
  }

  {
    Reader meta(read_section(r, SectionTag::Meta));
    out.meta.page_size = meta.get<uint64_t>();
    out.meta.arena_capacity = meta.get<uint64_t>();
    out.meta.shadow_base = meta.get<uint64_t>();
    out.meta.mode = meta.get<uint8_t>();
  }
  {
    Reader replay(read_section(r, SectionTag::Replay));
    const auto count = replay.get<uint64_t>();
    for (uint64_t i = 0; i < count; ++i) {
      out.replay.push_back(replay.get<client::ReplayRecord>());
    }
    if (!replay.done()) {
      throw Error(Errc::FormatError, "trailing bytes in replay section");
    }
  }
  {
    Reader regions(read_section(r, SectionTag::Regions));
    const auto count = regions.get<uint32_t>();
    regions.get<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
      RegionEntry e;
      e.id = regions.get<uint64_t>();
      e.kind = regions.get<uint8_t>();
      regions.take(7);
      e.length = regions.get<uint64_t>();
      e.shadow = regions.get<uint64_t>();
      out.regions.push_back(e);
    }
    if (!regions.done()) {
      throw Error(Errc::FormatError, "trailing bytes in region section");
    }
  }
  {
    Reader payload(read_section(r, SectionTag::Payload));
    for (const auto& e : out.regions) {
      std::vector<std::byte> data(e.length);
      uint64_t filled = 0;
      while (filled < e.length) {
        const auto raw_len = payload.get<uint32_t>();
        const auto enc_len = payload.get<uint32_t>();
        if (raw_len == 0 || raw_len > e.length - filled) {
          throw Error(Errc::FormatError, "payload chunk overruns region " + std::to_string(e.id));
        }
        decode_chunk(out.codec, payload.take(enc_len), {data.data() + filled, raw_len});
        filled += raw_len;
      }
      out.payloads.push_back(std::move(data));
    }
    if (!payload.done()) {
      throw Error(Errc::FormatError, "payload longer than the region table accounts for");
    }
  }
  {
    auto blob = read_section(r, SectionTag::AppState);
    out.app_state.assign(blob.begin(), blob.end());
  }
  if (!r.done()) {
    throw Error(Errc::FormatError, "trailing bytes after the last section");
  }
  return out;
}

}  // namespace crum::ckpt
