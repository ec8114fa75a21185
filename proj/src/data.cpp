#include "calm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "calm/error.hpp"

namespace calm {

namespace {

constexpr const char* kReservedNames[] = {"<pad>", "<mask>", "<unk>"};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

// Splits text into documents on blank lines. Lines keep their newlines
// except the last line of each document.
std::vector<std::string> split_documents(const std::string& text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  auto flush = [&] {
    if (!current.empty()) docs.push_back(std::move(current));
    current.clear();
  };
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (is_blank(line)) {
      flush();
    } else {
      if (!current.empty()) current += '\n';
      current += line;
    }
    pos = end + 1;
  }
  flush();
  return docs;
}

std::string escape_symbol(char32_t cp) {
  switch (cp) {
    case U'\n': return "\\n";
    case U'\t': return "\\t";
    case U'\r': return "\\r";
    case U' ': return "\\s";
    case U'\\': return "\\\\";
    default: return encode_utf8(cp);
  }
}

char32_t unescape_symbol(const std::string& line, const std::filesystem::path& path) {
  if (line == "\\n") return U'\n';
  if (line == "\\t") return U'\t';
  if (line == "\\r") return U'\r';
  if (line == "\\s") return U' ';
  if (line == "\\\\") return U'\\';
  const std::u32string cps = decode_utf8(line);
  if (cps.size() != 1) throw DataError("vocabulary " + path.string() + ": bad symbol line '" + line + "'");
  return cps[0];
}

}  // namespace

std::u32string decode_utf8(std::string_view text) {
  std::u32string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    const auto b0 = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > text.size()) throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(text[i + k]);
      if ((b & 0xC0) != 0x80) throw DataError("invalid UTF-8 continuation at offset " + std::to_string(i + k));
      cp = (cp << 6) | (b & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string encode_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<char32_t> symbols) : symbols_(std::move(symbols)) {
  std::sort(symbols_.begin(), symbols_.end());
  symbols_.erase(std::unique(symbols_.begin(), symbols_.end()), symbols_.end());
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    index_.emplace(symbols_[i], static_cast<std::int32_t>(i) + kFirstSymbolId);
  }
}

Vocabulary Vocabulary::from_texts(std::span<const std::string> texts) {
  std::set<char32_t> seen;
  for (const auto& t : texts)
    for (char32_t cp : decode_utf8(t)) seen.insert(cp);
  return Vocabulary(std::vector<char32_t>(seen.begin(), seen.end()));
}

Vocabulary Vocabulary::from_files(std::span<const std::filesystem::path> paths) {
  std::set<char32_t> seen;
  for (const auto& p : paths) {
    for (const auto& doc : split_documents(read_file(p)))
      for (char32_t cp : decode_utf8(doc)) seen.insert(cp);
  }
  return Vocabulary(std::vector<char32_t>(seen.begin(), seen.end()));
}

std::int32_t Vocabulary::id(char32_t symbol) const {
  auto it = index_.find(symbol);
  return it == index_.end() ? kUnkId : it->second;
}

std::string Vocabulary::symbol(std::int32_t id) const {
  if (id >= 0 && id < kFirstSymbolId) return kReservedNames[id];
  if (id < 0 || static_cast<std::size_t>(id) >= size()) return "<invalid>";
  return encode_utf8(symbols_[static_cast<std::size_t>(id - kFirstSymbolId)]);
}

std::vector<std::int32_t> Vocabulary::encode(std::string_view utf8) const {
  std::vector<std::int32_t> ids;
  for (char32_t cp : decode_utf8(utf8)) ids.push_back(id(cp));
  return ids;
}

std::string Vocabulary::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (auto i : ids) out += symbol(i);
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const char* name : kReservedNames) out << name << '\n';
  for (char32_t cp : symbols_) out << escape_symbol(cp) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  for (const char* name : kReservedNames) {
    if (!std::getline(in, line) || line != name) {
      throw DataError("vocabulary " + path.string() + ": expected reserved header line " + name);
    }
  }
  std::vector<char32_t> symbols;
  while (std::getline(in, line)) symbols.push_back(unescape_symbol(line, path));
  Vocabulary v(symbols);
  if (v.symbols_.size() != symbols.size() || !std::is_sorted(symbols.begin(), symbols.end())) {
    throw DataError("vocabulary " + path.string() + ": symbols must be unique and ordered");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(std::string domain_id, std::vector<std::vector<std::int32_t>> documents, std::size_t vocab_size) {
  documents.erase(std::remove_if(documents.begin(), documents.end(), [](const auto& d) { return d.empty(); }),
                  documents.end());
  for (const auto& d : documents)
    for (auto id : d)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw DataError("corpus " + domain_id + ": token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(vocab_size));
      }
  data_ = std::make_shared<const Data>(Data{std::move(domain_id), std::move(documents), vocab_size});
}

std::size_t Corpus::token_count() const noexcept {
  std::size_t n = 0;
  for (const auto& d : data_->documents) n += d.size();
  return n;
}

void Corpus::set_access_hook(AccessHook hook) {
  hook_ = hook ? std::make_shared<const AccessHook>(std::move(hook)) : nullptr;
}

void Corpus::note_access(std::string_view purpose) const {
  if (hook_) (*hook_)(domain_id(), purpose);
}

Corpus ingest(const std::filesystem::path& path, const std::string& domain_id, const Vocabulary& vocab) {
  std::vector<std::vector<std::int32_t>> docs;
  for (const auto& text : split_documents(read_file(path))) docs.push_back(vocab.encode(text));
  Corpus corpus(domain_id, std::move(docs), vocab.size());
  if (corpus.document_count() == 0) throw EmptyCorpusError("no documents in " + path.string());
  return corpus;
}

CorpusSplit split(const Corpus& corpus, std::uint64_t seed) {
  const std::size_t n = corpus.document_count();
  if (n < 10) {
    throw InsufficientDataError("split: corpus " + corpus.domain_id() + " has " + std::to_string(n) +
                                " documents, need at least 10");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  const std::size_t n_valid = n / 10;
  const std::size_t n_test = n / 10;
  const std::size_t n_train = n - n_valid - n_test;
  auto take = [&](std::size_t begin, std::size_t count) {
    std::vector<std::vector<std::int32_t>> docs;
    docs.reserve(count);
    for (std::size_t i = begin; i < begin + count; ++i) docs.push_back(corpus.documents()[order[i]]);
    return Corpus(corpus.domain_id(), std::move(docs), corpus.vocab_size());
  };
  return {take(0, n_train), take(n_train, n_valid), take(n_train + n_valid, n_test)};
}

// ---------------------------------------------------------------------------
// Masking and batching

std::size_t TokenBatch::target_count() const {
  return static_cast<std::size_t>(
      std::count_if(targets.values.begin(), targets.values.end(), [](auto t) { return t != kIgnoreIndex; }));
}

TokenBatch mask_batch(const IdMatrix& sequences, double mask_prob, Rng& rng, std::size_t vocab_size,
                      std::string domain_id) {
  TokenBatch batch{sequences, IdMatrix(sequences.rows, sequences.cols, kIgnoreIndex), std::move(domain_id)};
  const auto text_symbols = vocab_size > kFirstSymbolId ? vocab_size - kFirstSymbolId : 0;
  for (std::size_t i = 0; i < sequences.values.size(); ++i) {
    if (!(rng.uniform() < mask_prob)) continue;
    batch.targets.values[i] = sequences.values[i];
    const double r = rng.uniform();
    if (r < 0.8) {
      batch.inputs.values[i] = kMaskId;
    } else if (r < 0.9 && text_symbols > 0) {
      batch.inputs.values[i] = static_cast<std::int32_t>(rng.below(text_symbols)) + kFirstSymbolId;
    }
  }
  return batch;
}

IdMatrix make_windows(const Corpus& corpus, std::size_t seq_len, std::string_view purpose) {
  if (seq_len == 0) throw ContractError("make_windows: seq_len must be positive");
  corpus.note_access(purpose);
  std::vector<std::int32_t> stream;
  stream.reserve(corpus.token_count() + corpus.document_count());
  for (const auto& d : corpus.documents()) {
    stream.insert(stream.end(), d.begin(), d.end());
    stream.push_back(kBoundaryId);
  }
  IdMatrix windows(stream.size() / seq_len, seq_len);
  std::copy_n(stream.begin(), windows.values.size(), windows.values.begin());
  return windows;
}

BatchStream::BatchStream(Corpus corpus, StreamOptions options, std::string purpose)
    : corpus_(std::move(corpus)), options_(options), purpose_(std::move(purpose)) {
  if (options_.batch_size == 0 || options_.seq_len == 0) {
    throw ContractError("batch stream: batch_size and seq_len must be positive");
  }
  if (!(options_.mask_prob >= 0.0 && options_.mask_prob <= 1.0)) {
    throw ContractError("batch stream: mask_prob must lie in [0, 1]");
  }
  windows_ = make_windows(corpus_, options_.seq_len, purpose_);
  if (windows_.rows == 0) {
    throw InsufficientDataError("corpus " + corpus_.domain_id() + " is shorter than one window of " +
                                std::to_string(options_.seq_len) + " tokens");
  }
  if (batches_per_epoch() == 0) {
    throw InsufficientDataError("corpus " + corpus_.domain_id() + " yields " + std::to_string(windows_.rows) +
                                " windows, fewer than one batch of " + std::to_string(options_.batch_size));
  }
  start_epoch();
}

void BatchStream::start_epoch() {
  order_.resize(windows_.rows);
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  Rng rng(derive_seed(derive_seed(options_.seed, "shuffle"), epoch_));
  rng.shuffle(order_);
  cursor_ = 0;
}

TokenBatch BatchStream::next() {
  if (cursor_ == batches_per_epoch()) {
    ++epoch_;
    start_epoch();
  }
  corpus_.note_access(purpose_);
  const std::size_t b = options_.batch_size;
  const std::size_t len = options_.seq_len;
  IdMatrix seqs(b, len);
  for (std::size_t r = 0; r < b; ++r) {
    const std::size_t w = order_[cursor_ * b + r];
    std::copy_n(windows_.values.begin() + static_cast<std::ptrdiff_t>(w * len), len,
                seqs.values.begin() + static_cast<std::ptrdiff_t>(r * len));
  }
  Rng rng(derive_seed(derive_seed(derive_seed(options_.seed, "mask"), epoch_), cursor_));
  ++cursor_;
  return mask_batch(seqs, options_.mask_prob, rng, corpus_.vocab_size(), corpus_.domain_id());
}

MixedStream::MixedStream(std::vector<Corpus> corpora, std::vector<double> weights, StreamOptions options)
    : choice_(derive_seed(options.seed, "mix")) {
  if (corpora.empty() || corpora.size() != weights.size()) {
    throw ContractError("mixed stream: need one weight per corpus");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ContractError("mixed stream: weights must be non-negative");
    total += w;
  }
  if (total == 0.0) throw ContractError("mixed stream: weights are all zero");
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("mixed stream: weights must sum to 1");
  double acc = 0.0;
  for (std::size_t k = 0; k < corpora.size(); ++k) {
    streams_.emplace_back(std::move(corpora[k]), options);
    acc += weights[k];
    cumulative_.push_back(weights[k] > 0.0 ? acc : -1.0);
  }
}

TokenBatch MixedStream::next() {
  const double u = choice_.uniform();
  std::size_t pick = streams_.size();
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < cumulative_.size(); ++k) {
    if (cumulative_[k] < 0.0) continue;
    last_positive = k;
    if (u < cumulative_[k]) {
      pick = k;
      break;
    }
  }
  if (pick == streams_.size()) pick = last_positive;
  last_ = pick;
  return streams_[pick].next();
}

std::size_t MixedStream::batches_per_epoch() const noexcept {
  std::size_t n = 0;
  for (const auto& s : streams_) n += s.batches_per_epoch();
  return n;
}

// ---------------------------------------------------------------------------
// Replay

void ReplayBuffer::push(TokenBatch batch) {
  if (capacity_ == 0) throw ContractError("replay buffer: capacity is zero");
  if (batches_.size() == capacity_) {
    batches_.pop_front();
    if (cursor_ > 0) --cursor_;
  }
  batches_.push_back(std::move(batch));
}

const TokenBatch& ReplayBuffer::next_replay() {
  if (batches_.empty()) throw ContractError("replay buffer: no batches to replay");
  if (cursor_ >= batches_.size()) cursor_ = 0;
  return batches_[cursor_++];
}

std::set<std::string> ReplayBuffer::source_domains() const {
  std::set<std::string> out;
  for (const auto& b : batches_) out.insert(b.domain_id);
  return out;
}

void ReplayBuffer::check_excludes(std::string_view current_domain) const {
  for (const auto& b : batches_) {
    if (b.domain_id == current_domain) {
      throw ContractError("replay buffer holds batches of the current domain " + std::string(current_domain));
    }
  }
}

void buffer_fill(ReplayBuffer& buffer, BatchStream& source, std::size_t n) {
  if (n > buffer.capacity()) {
    throw ContractError("buffer_fill: " + std::to_string(n) + " batches exceed capacity " +
                        std::to_string(buffer.capacity()));
  }
  for (std::size_t i = 0; i < n; ++i) buffer.push(source.next());
}

}  // namespace calm
