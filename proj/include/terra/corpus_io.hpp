#pragma once

#include <string>
#include <vector>

#include "terra/data.hpp"

namespace terra::data {

// Sharded corpus files: each shard holds whole records; a record is a
// header (site id, period index, support period, frame count) followed by
// frames (source id, timestamp, raster extents, metadata, mask bitmap,
// pixel payload), all little-endian.
inline constexpr char kCorpusMagic[4] = {'T', 'F', 'S', 'Q'};
inline constexpr uint32_t kCorpusVersion = 1;

std::string shard_name(int shard);

// Round-robins records over `shards` files named corpus-NNN.bin under dir.
void write_corpus(const std::string& dir, const std::vector<ObservationSequence>& corpus,
                  int shards);

// Reads every corpus-*.bin shard in the directory, in shard order.
std::vector<ObservationSequence> read_corpus(const std::string& dir);

}  // namespace terra::data
