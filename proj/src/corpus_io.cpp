#include "terra/corpus_io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace terra::data {

namespace fs = std::filesystem;

namespace {

template <class T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) raise_io("corpus: truncated shard");
  return v;
}

void write_record(std::ofstream& out, const ObservationSequence& seq) {
  write_pod<uint64_t>(out, seq.site_id);
  write_pod<int32_t>(out, seq.period_index);
  write_pod<int64_t>(out, seq.support.start);
  write_pod<int64_t>(out, seq.support.end);
  write_pod<uint32_t>(out, static_cast<uint32_t>(seq.frames.size()));
  for (const auto& f : seq.frames) {
    write_pod<uint16_t>(out, static_cast<uint16_t>(f.source_id));
    write_pod<int64_t>(out, f.t);
    write_pod<uint16_t>(out, static_cast<uint16_t>(f.height));
    write_pod<uint16_t>(out, static_cast<uint16_t>(f.width));
    write_pod<uint16_t>(out, static_cast<uint16_t>(f.channels));
    write_pod<uint16_t>(out, static_cast<uint16_t>(f.metadata.size()));
    out.write(reinterpret_cast<const char*>(f.metadata.data()),
              static_cast<std::streamsize>(f.metadata.size() * sizeof(float)));
    // mask bitmap, 8 pixels per byte
    size_t np = f.pixel_count();
    std::vector<uint8_t> bits((np + 7) / 8, 0);
    for (size_t p = 0; p < np; ++p) {
      if (f.mask[p]) bits[p / 8] |= static_cast<uint8_t>(1u << (p % 8));
    }
    out.write(reinterpret_cast<const char*>(bits.data()),
              static_cast<std::streamsize>(bits.size()));
    out.write(reinterpret_cast<const char*>(f.pixels.data()),
              static_cast<std::streamsize>(f.pixels.size() * sizeof(float)));
  }
}

ObservationSequence read_record(std::ifstream& in) {
  ObservationSequence seq;
  seq.site_id = read_pod<uint64_t>(in);
  seq.period_index = read_pod<int32_t>(in);
  seq.support.start = read_pod<int64_t>(in);
  seq.support.end = read_pod<int64_t>(in);
  auto nframes = read_pod<uint32_t>(in);
  seq.frames.reserve(nframes);
  for (uint32_t i = 0; i < nframes; ++i) {
    Frame f;
    f.source_id = read_pod<uint16_t>(in);
    f.t = read_pod<int64_t>(in);
    f.height = read_pod<uint16_t>(in);
    f.width = read_pod<uint16_t>(in);
    f.channels = read_pod<uint16_t>(in);
    auto meta = read_pod<uint16_t>(in);
    f.metadata.resize(meta);
    in.read(reinterpret_cast<char*>(f.metadata.data()),
            static_cast<std::streamsize>(meta * sizeof(float)));
    size_t np = f.pixel_count();
    std::vector<uint8_t> bits((np + 7) / 8);
    in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
    f.mask.resize(np);
    for (size_t p = 0; p < np; ++p) {
      f.mask[p] = (bits[p / 8] >> (p % 8)) & 1u;
    }
    f.pixels.resize(np * static_cast<size_t>(f.channels));
    in.read(reinterpret_cast<char*>(f.pixels.data()),
            static_cast<std::streamsize>(f.pixels.size() * sizeof(float)));
    if (!in) raise_io("corpus: truncated frame payload");
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

}  // namespace

std::string shard_name(int shard) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "corpus-%03d.bin", shard);
  return buf;
}

void write_corpus(const std::string& dir, const std::vector<ObservationSequence>& corpus,
                  int shards) {
  check_input(shards >= 1, "corpus: shard count must be positive");
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::vector<std::vector<const ObservationSequence*>> by_shard(static_cast<size_t>(shards));
  for (size_t i = 0; i < corpus.size(); ++i) {
    by_shard[i % static_cast<size_t>(shards)].push_back(&corpus[i]);
  }
  for (int s = 0; s < shards; ++s) {
    std::string path = (fs::path(dir) / shard_name(s)).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) raise_io("corpus: cannot open for writing: " + path);
    out.write(kCorpusMagic, 4);
    write_pod<uint32_t>(out, kCorpusVersion);
    write_pod<uint32_t>(out, static_cast<uint32_t>(by_shard[static_cast<size_t>(s)].size()));
    for (const auto* seq : by_shard[static_cast<size_t>(s)]) write_record(out, *seq);
    if (!out) raise_io("corpus: write failed: " + path);
  }
}

std::vector<ObservationSequence> read_corpus(const std::string& dir) {
  std::vector<std::string> paths;
  for (int s = 0;; ++s) {
    std::string path = (fs::path(dir) / shard_name(s)).string();
    if (!fs::exists(path)) break;
    paths.push_back(path);
  }
  if (paths.empty()) raise_io("corpus: no shards found under " + dir);
  std::vector<ObservationSequence> corpus;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise_io("corpus: cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCorpusMagic, 4) != 0) raise_io("corpus: bad magic in " + path);
    auto version = read_pod<uint32_t>(in);
    if (version != kCorpusVersion) raise_io("corpus: unsupported version in " + path);
    auto count = read_pod<uint32_t>(in);
    for (uint32_t i = 0; i < count; ++i) corpus.push_back(read_record(in));
  }
  return corpus;
}

}  // namespace terra::data
