#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace samic {

inline constexpr int kFreqBits = 16;
inline constexpr std::uint32_t kFreqTotal = 1u << kFreqBits;
inline constexpr int kDefaultAlphabetRadius = 64;

/// Malformed, truncated, or mismatched stream.
class CorruptStream : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cumulative counts over symbols [lo, lo + n) plus a trailing escape slot.
/// Every slot has count >= 1 and the total is 2^16.
struct FrequencyTable {
  int lo = 0;
  std::vector<std::uint32_t> cum;  // n + 2 entries: cum[0] = 0, cum.back() = 2^16

  int symbols() const { return static_cast<int>(cum.size()) - 2; }  // excluding escape
  int hi() const { return lo + symbols() - 1; }
  int escape_slot() const { return symbols(); }
  bool in_range(int s) const { return s >= lo && s <= hi(); }
  std::uint32_t count(int slot) const { return cum[static_cast<std::size_t>(slot) + 1] - cum[static_cast<std::size_t>(slot)]; }
  /// Table probability of slot (escape included).
  double probability(int slot) const { return static_cast<double>(count(slot)) / kFreqTotal; }
  /// Cost in bits of coding s with this table, raw escape bits included.
  double bits(int s) const;
};

/// Quantizes `probs` (symbols lo .. lo + probs.size() - 1) and `escape_mass`
/// onto 2^16 by largest remainder after reserving one count per slot.
FrequencyTable table_from_masses(int lo, const std::vector<double>& probs, double escape_mass);

/// Discretized N(mu, sigma) over integer symbols. The explicit range is
/// [-r, r] with r = min(radius, ceil(mu_abs + 8 sigma) + 1); everything else escapes.
FrequencyTable build_table(double mu, double sigma, int radius = kDefaultAlphabetRadius);

/// Discretized distribution with the given CDF over [-radius, radius].
FrequencyTable build_table_from_cdf(const std::function<double(double)>& cdf, int radius = kDefaultAlphabetRadius);

/// 64-bit carry-less range encoder (Subbotin style renormalization).
class RangeEncoder {
 public:
  /// With `sentinel`, finish() appends a 16-bit hash of the coded symbols; `salt` is folded into
  /// it so side information (e.g. header fields) is checked too.
  explicit RangeEncoder(std::uint64_t salt = 0, bool sentinel = true);
  void encode(std::uint32_t cum_freq, std::uint32_t freq);
  /// Up to 16 raw bits at uniform probability.
  void encode_bits(std::uint32_t value, int nbits);
  void encode_symbol(int s, const FrequencyTable& table);
  /// Appends the 16-bit symbol hash and flushes the fewest bytes that pin the final interval.
  std::vector<std::uint8_t> finish();

 private:
  void shift_out();
  std::uint64_t low_ = 0;
  std::uint64_t range_ = ~std::uint64_t{0};
  std::uint64_t hash_;
  bool sentinel_;
  std::size_t count_ = 0;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes, std::uint64_t salt = 0, bool sentinel = true);
  std::uint32_t decode_bits(int nbits);
  int decode_symbol(const FrequencyTable& table);
  /// Checks the hash sentinel (when enabled) and that the stream ends exactly with its canonical flush.
  void finish();

 private:
  std::uint32_t decode_freq();
  void consume(std::uint32_t cum_freq, std::uint32_t freq);
  void shift_in();
  std::uint8_t next_byte();
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint64_t low_ = 0;
  std::uint64_t range_ = ~std::uint64_t{0};
  std::uint64_t code_ = 0;
  std::uint64_t hash_;
  bool sentinel_;
  std::size_t count_ = 0;
};

/// 64-bit FNV-1a over 32-bit symbols, for chaining side information into a sentinel salt.
std::uint64_t symbol_hash(std::span<const int> symbols, std::uint64_t seed = 0);

std::vector<std::uint8_t> rc_encode(const std::vector<int>& symbols, const std::vector<FrequencyTable>& tables);
std::vector<int> rc_decode(std::span<const std::uint8_t> bytes, const std::vector<FrequencyTable>& tables);

/// Container: "SAMC", u8 version, u16 width, u16 height, u8 lambda index, u8 K, u8 J,
/// u32 hyper length, hyper payload, u32 latent length, latent payload; little-endian.
struct Bitstream {
  static constexpr std::uint8_t kVersion = 1;
  static constexpr std::size_t kOverheadBytes = 4 + 1 + 2 + 2 + 3 + 4 + 4;
  std::uint16_t width = 0, height = 0;
  std::uint8_t lambda_index = 0, clusters = 0, chunks = 0;
  std::vector<std::uint8_t> hyper_payload, latent_payload;

  std::vector<std::uint8_t> serialize() const;
  static Bitstream parse(std::span<const std::uint8_t> bytes);
  std::size_t payload_bytes() const { return hyper_payload.size() + latent_payload.size(); }
};

}  // namespace samic
