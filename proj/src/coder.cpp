#include "samic/coder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>
#include <utility>

namespace samic {

namespace {

constexpr std::uint64_t kTop = std::uint64_t{1} << 56;
constexpr std::uint64_t kBot = std::uint64_t{1} << 48;
constexpr int kEscapeLengthBits = 5;

// Upper tail 1 - Phi(x), accurate far out.
double normal_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

void hash_symbol(std::uint64_t& h, int s) {
  const auto u = static_cast<std::uint32_t>(s);
  for (int b = 0; b < 4; ++b) {
    h ^= (u >> (8 * b)) & 0xFFu;
    h *= 1099511628211ULL;
  }
}

std::uint64_t salted_hash(std::uint64_t salt) {
  std::uint64_t h = 14695981039346656037ULL;
  hash_symbol(h, static_cast<int>(salt & 0xFFFFFFFFu));
  hash_symbol(h, static_cast<int>(salt >> 32));
  return h;
}

std::uint32_t fold16(std::uint64_t h) { return static_cast<std::uint32_t>((h ^ (h >> 16) ^ (h >> 32) ^ (h >> 48)) & 0xFFFFu); }

// Value in [low, low + range) with the most trailing zero bytes, and its significant byte count.
std::pair<std::uint64_t, int> canonical_flush(std::uint64_t low, std::uint64_t range) {
  for (int n = 1; n < 8; ++n) {
    const std::uint64_t mask = ~std::uint64_t{0} >> (8 * n);
    const std::uint64_t v = (low + mask) & ~mask;
    if (v >= low && v - low < range) return {v, n};
  }
  return {low, 8};
}

}  // namespace

double FrequencyTable::bits(int s) const {
  if (in_range(s)) return -std::log2(probability(s - lo));
  const std::uint32_t excess = s > hi() ? static_cast<std::uint32_t>(s - hi() - 1) : static_cast<std::uint32_t>(lo - 1 - s);
  const int nb = std::bit_width(excess + 1u) - 1;
  return -std::log2(probability(escape_slot())) + 1 + kEscapeLengthBits + nb;
}

FrequencyTable table_from_masses(int lo, const std::vector<double>& probs, double escape_mass) {
  const std::size_t n = probs.size() + 1;
  if (probs.empty() || n > kFreqTotal / 2) throw std::invalid_argument("alphabet size out of range");
  std::vector<double> mass(n);
  for (std::size_t i = 0; i < probs.size(); ++i) mass[i] = std::max(probs[i], 0.0);
  mass.back() = std::max(escape_mass, 0.0);
  double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  if (!(total > 0.0) || !std::isfinite(total)) {
    std::fill(mass.begin(), mass.end(), 1.0);
    total = static_cast<double>(n);
  }
  const double spare = static_cast<double>(kFreqTotal - n);
  std::vector<std::uint32_t> counts(n);
  std::vector<double> frac(n);
  std::uint32_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = mass[i] / total * spare;
    const double whole = std::floor(target);
    counts[i] = 1 + static_cast<std::uint32_t>(whole);
    frac[i] = target - whole;
    used += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; used < kFreqTotal; k = (k + 1) % n, ++used) ++counts[order[k]];
  FrequencyTable t;
  t.lo = lo;
  t.cum.resize(n + 1);
  t.cum[0] = 0;
  for (std::size_t i = 0; i < n; ++i) t.cum[i + 1] = t.cum[i] + counts[i];
  return t;
}

FrequencyTable build_table(double mu, double sigma, int radius) {
  if (radius < 1) throw std::invalid_argument("alphabet radius must be >= 1");
  if (!(sigma > 0.0) || !std::isfinite(mu)) throw std::invalid_argument("invalid Gaussian parameters");
  const double reach = std::ceil(std::abs(mu) + 8.0 * sigma) + 1.0;
  const int r = reach >= radius ? radius : static_cast<int>(reach);
  std::vector<double> probs(static_cast<std::size_t>(2 * r + 1));
  for (int k = -r; k <= r; ++k) {
    // Evaluate on the tail side of mu so small masses keep their precision.
    const double d = std::abs(k - mu);
    probs[static_cast<std::size_t>(k + r)] = normal_sf((d - 0.5) / sigma) - normal_sf((d + 0.5) / sigma);
    if (d < 0.5) probs[static_cast<std::size_t>(k + r)] = 1.0 - normal_sf((0.5 - d) / sigma) - normal_sf((d + 0.5) / sigma);
  }
  const double escape = normal_sf((r + 0.5 - mu) / sigma) + normal_sf((r + 0.5 + mu) / sigma);
  return table_from_masses(-r, probs, escape);
}

FrequencyTable build_table_from_cdf(const std::function<double(double)>& cdf, int radius) {
  if (radius < 1) throw std::invalid_argument("alphabet radius must be >= 1");
  std::vector<double> probs(static_cast<std::size_t>(2 * radius + 1));
  double prev = cdf(-radius - 0.5);
  const double below = prev;
  for (int k = -radius; k <= radius; ++k) {
    const double next = cdf(k + 0.5);
    probs[static_cast<std::size_t>(k + radius)] = next - prev;
    prev = next;
  }
  return table_from_masses(-radius, probs, below + (1.0 - prev));
}

// ---------------------------------------------------------------------------

RangeEncoder::RangeEncoder(std::uint64_t salt, bool sentinel) : hash_(salted_hash(salt)), sentinel_(sentinel) {}

void RangeEncoder::shift_out() {
  for (;;) {
    if ((low_ ^ (low_ + range_)) >= kTop) {
      if (range_ >= kBot) break;
      range_ = (0 - low_) & (kBot - 1);
    }
    out_.push_back(static_cast<std::uint8_t>(low_ >> 56));
    low_ <<= 8;
    range_ <<= 8;
  }
}

void RangeEncoder::encode(std::uint32_t cum_freq, std::uint32_t freq) {
  const std::uint64_t r = range_ >> kFreqBits;
  low_ += r * cum_freq;
  range_ = r * freq;
  shift_out();
}

void RangeEncoder::encode_bits(std::uint32_t value, int nbits) {
  if (nbits < 1 || nbits > 16) throw std::invalid_argument("raw bit count must be in [1, 16]");
  const std::uint64_t r = range_ >> nbits;
  low_ += r * (value & ((1u << nbits) - 1));
  range_ = r;
  shift_out();
}

void RangeEncoder::encode_symbol(int s, const FrequencyTable& table) {
  hash_symbol(hash_, s);
  ++count_;
  if (table.in_range(s)) {
    const int slot = s - table.lo;
    encode(table.cum[static_cast<std::size_t>(slot)], table.count(slot));
    return;
  }
  const int slot = table.escape_slot();
  encode(table.cum[static_cast<std::size_t>(slot)], table.count(slot));
  const bool above = s > table.hi();
  const std::uint32_t excess =
      above ? static_cast<std::uint32_t>(s - table.hi() - 1) : static_cast<std::uint32_t>(table.lo - 1 - s);
  encode_bits(above ? 0 : 1, 1);
  const std::uint32_t v = excess + 1;
  const int nb = std::bit_width(v) - 1;
  encode_bits(static_cast<std::uint32_t>(nb), kEscapeLengthBits);
  for (int done = 0; done < nb; done += 16) {
    const int take = std::min(16, nb - done);
    encode_bits(v >> done, take);
  }
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  if (count_ == 0) return {};
  if (sentinel_) encode_bits(fold16(hash_), 16);
  const auto [v, n] = canonical_flush(low_, range_);
  for (int b = 0; b < n; ++b) out_.push_back(static_cast<std::uint8_t>(v >> (56 - 8 * b)));
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes, std::uint64_t salt, bool sentinel)
    : in_(bytes), hash_(salted_hash(salt)), sentinel_(sentinel) {
  if (in_.empty()) return;
  for (int i = 0; i < 8; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  const std::uint8_t b = pos_ < in_.size() ? in_[pos_] : 0;
  ++pos_;
  return b;
}

void RangeDecoder::shift_in() {
  for (;;) {
    if ((low_ ^ (low_ + range_)) >= kTop) {
      if (range_ >= kBot) break;
      range_ = (0 - low_) & (kBot - 1);
    }
    code_ = (code_ << 8) | next_byte();
    low_ <<= 8;
    range_ <<= 8;
  }
  if (pos_ > in_.size() + 7) throw CorruptStream("stream truncated");
}

std::uint32_t RangeDecoder::decode_freq() {
  if (in_.empty()) throw CorruptStream("symbol requested from an empty stream");
  const std::uint64_t v = (code_ - low_) / (range_ >> kFreqBits);
  if (v >= kFreqTotal) throw CorruptStream("code value outside the coding interval");
  return static_cast<std::uint32_t>(v);
}

void RangeDecoder::consume(std::uint32_t cum_freq, std::uint32_t freq) {
  const std::uint64_t r = range_ >> kFreqBits;
  low_ += r * cum_freq;
  range_ = r * freq;
  shift_in();
}

std::uint32_t RangeDecoder::decode_bits(int nbits) {
  if (nbits < 1 || nbits > 16) throw std::invalid_argument("raw bit count must be in [1, 16]");
  if (in_.empty()) throw CorruptStream("raw bits requested from an empty stream");
  const std::uint64_t r = range_ >> nbits;
  const std::uint64_t v = (code_ - low_) / r;
  if (v >> nbits) throw CorruptStream("code value outside the coding interval");
  low_ += r * v;
  range_ = r;
  shift_in();
  return static_cast<std::uint32_t>(v);
}

int RangeDecoder::decode_symbol(const FrequencyTable& table) {
  const std::uint32_t f = decode_freq();
  const auto it = std::upper_bound(table.cum.begin(), table.cum.end(), f);
  const int slot = static_cast<int>(it - table.cum.begin()) - 1;
  consume(table.cum[static_cast<std::size_t>(slot)], table.count(slot));
  int s = 0;
  if (slot != table.escape_slot()) {
    s = table.lo + slot;
  } else {
    const bool below = decode_bits(1) != 0;
    const int nb = static_cast<int>(decode_bits(kEscapeLengthBits));
    std::uint32_t v = 0;
    for (int done = 0; done < nb; done += 16) {
      const int take = std::min(16, nb - done);
      v |= decode_bits(take) << done;
    }
    v |= 1u << nb;
    const auto excess = static_cast<std::int64_t>(v) - 1;
    const std::int64_t value = below ? table.lo - 1 - excess : table.hi() + 1 + excess;
    if (value < INT32_MIN || value > INT32_MAX) throw CorruptStream("escaped symbol out of range");
    s = static_cast<int>(value);
  }
  hash_symbol(hash_, s);
  ++count_;
  return s;
}

void RangeDecoder::finish() {
  if (in_.empty()) return;  // decoding any symbol from it would already have thrown
  if (count_ == 0) throw CorruptStream("payload present but no symbols expected");
  if (sentinel_ && decode_bits(16) != fold16(hash_)) throw CorruptStream("stream sentinel mismatch");
  // The tail must be exactly the encoder's flush: pos_ - 8 bytes were emitted before it.
  const auto [v, n] = canonical_flush(low_, range_);
  if (in_.size() != pos_ - 8 + static_cast<std::size_t>(n) || code_ != v) {
    throw CorruptStream("stream does not end with its canonical flush");
  }
}

std::uint64_t symbol_hash(std::span<const int> symbols, std::uint64_t seed) {
  std::uint64_t h = salted_hash(seed);
  for (int s : symbols) hash_symbol(h, s);
  return h;
}

std::vector<std::uint8_t> rc_encode(const std::vector<int>& symbols, const std::vector<FrequencyTable>& tables) {
  if (symbols.size() != tables.size()) throw std::invalid_argument("one table per symbol required");
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode_symbol(symbols[i], tables[i]);
  return enc.finish();
}

std::vector<int> rc_decode(std::span<const std::uint8_t> bytes, const std::vector<FrequencyTable>& tables) {
  RangeDecoder dec(bytes);
  std::vector<int> out;
  out.reserve(tables.size());
  for (const auto& t : tables) out.push_back(dec.decode_symbol(t));
  dec.finish();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void put_u8(std::vector<std::uint8_t>& o, std::uint8_t v) { o.push_back(v); }
void put_u16(std::vector<std::uint8_t>& o, std::uint16_t v) {
  o.push_back(static_cast<std::uint8_t>(v));
  o.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) o.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

struct Reader {
  std::span<const std::uint8_t> in;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (in.size() - pos < n) throw CorruptStream("bitstream truncated");
  }
  std::uint8_t u8() {
    need(1);
    return in[pos++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(in[pos] | (in[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in[pos + b]) << (8 * b);
    pos += 4;
    return v;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(in.begin() + static_cast<std::ptrdiff_t>(pos), in.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> Bitstream::serialize() const {
  std::vector<std::uint8_t> o{'S', 'A', 'M', 'C'};
  put_u8(o, kVersion);
  put_u16(o, width);
  put_u16(o, height);
  put_u8(o, lambda_index);
  put_u8(o, clusters);
  put_u8(o, chunks);
  put_u32(o, static_cast<std::uint32_t>(hyper_payload.size()));
  o.insert(o.end(), hyper_payload.begin(), hyper_payload.end());
  put_u32(o, static_cast<std::uint32_t>(latent_payload.size()));
  o.insert(o.end(), latent_payload.begin(), latent_payload.end());
  return o;
}

Bitstream Bitstream::parse(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  if (r.u8() != 'S' || r.u8() != 'A' || r.u8() != 'M' || r.u8() != 'C') throw CorruptStream("bad magic");
  if (r.u8() != kVersion) throw CorruptStream("unsupported bitstream version");
  Bitstream b;
  b.width = r.u16();
  b.height = r.u16();
  b.lambda_index = r.u8();
  b.clusters = r.u8();
  b.chunks = r.u8();
  b.hyper_payload = r.bytes(r.u32());
  b.latent_payload = r.bytes(r.u32());
  if (r.pos != bytes.size()) throw CorruptStream("trailing bytes after bitstream");
  if (b.width == 0 || b.height == 0) throw CorruptStream("empty image dimensions");
  return b;
}

}  // namespace samic
