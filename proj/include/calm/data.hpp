#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "calm/rng.hpp"
#include "calm/tensor.hpp"

namespace calm {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kMaskId = 1;
inline constexpr std::int32_t kUnkId = 2;
inline constexpr std::int32_t kFirstSymbolId = 3;
/// Separator inserted between documents when they are concatenated into
/// windows. PAD never occurs in text, so it doubles as the boundary marker.
inline constexpr std::int32_t kBoundaryId = kPadId;
/// Target value for positions that carry no prediction.
inline constexpr std::int32_t kIgnoreIndex = -1;

/// Character-level symbol table. Ids 0..2 are PAD, MASK and UNK; text symbols
/// (Unicode code points) follow in ascending code-point order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<char32_t> symbols);

  /// Vocabulary over every code point occurring in `texts`.
  static Vocabulary from_texts(std::span<const std::string> texts);
  /// Vocabulary over the union of the given UTF-8 files.
  static Vocabulary from_files(std::span<const std::filesystem::path> paths);

  std::size_t size() const noexcept { return symbols_.size() + kFirstSymbolId; }
  /// Id of a code point, or UNK when it is not in the table.
  std::int32_t id(char32_t symbol) const;
  /// Printable form of an id; reserved ids render as <pad>, <mask>, <unk>.
  std::string symbol(std::int32_t id) const;
  const std::vector<char32_t>& symbols() const noexcept { return symbols_; }

  std::vector<std::int32_t> encode(std::string_view utf8) const;
  std::string decode(std::span<const std::int32_t> ids) const;

  /// One symbol per line after a three-line reserved header. Newline, tab,
  /// carriage return, space and backslash are escaped as \n \t \r \s \\.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<char32_t> symbols_;
  std::unordered_map<char32_t, std::int32_t> index_;
};

/// Decodes UTF-8; throws DataError on malformed input.
std::u32string decode_utf8(std::string_view text);
std::string encode_utf8(char32_t cp);

/// Called with (domain_id, purpose) whenever a consumer reads corpus tokens.
using AccessHook = std::function<void(std::string_view domain_id, std::string_view purpose)>;

/// Immutable tokenized documents of one domain. Copies share storage.
class Corpus {
 public:
  Corpus() = default;
  Corpus(std::string domain_id, std::vector<std::vector<std::int32_t>> documents, std::size_t vocab_size);

  const std::string& domain_id() const noexcept { return data_->domain_id; }
  const std::vector<std::vector<std::int32_t>>& documents() const noexcept { return data_->documents; }
  std::size_t vocab_size() const noexcept { return data_->vocab_size; }
  std::size_t document_count() const noexcept { return data_->documents.size(); }
  std::size_t token_count() const noexcept;
  bool valid() const noexcept { return data_ != nullptr; }

  /// Installs an audit callback on this handle (and copies made afterwards).
  void set_access_hook(AccessHook hook);
  void note_access(std::string_view purpose) const;

 private:
  struct Data {
    std::string domain_id;
    std::vector<std::vector<std::int32_t>> documents;
    std::size_t vocab_size = 0;
  };
  std::shared_ptr<const Data> data_;
  std::shared_ptr<const AccessHook> hook_;
};

/// Reads a UTF-8 file whose documents are separated by blank lines.
/// Throws IoError if unreadable and EmptyCorpusError if no document remains.
Corpus ingest(const std::filesystem::path& path, const std::string& domain_id, const Vocabulary& vocab);

struct CorpusSplit {
  Corpus train;
  Corpus valid;
  Corpus test;
};

/// Document-level 8:1:1 partition after a seeded shuffle. Valid and test get
/// floor(n / 10) documents each; train gets the remainder.
CorpusSplit split(const Corpus& corpus, std::uint64_t seed);

struct TokenBatch {
  IdMatrix inputs;
  IdMatrix targets;
  std::string domain_id;

  std::size_t target_count() const;
  friend bool operator==(const TokenBatch&, const TokenBatch&) = default;
};

/// Selects each position with probability `mask_prob`; a selected position
/// becomes MASK (80%), a uniform text symbol (10%) or stays unchanged (10%),
/// and its target holds the original id. Unselected targets are kIgnoreIndex.
/// Per position, one uniform draw decides selection and, if selected, a
/// second decides the corruption (plus one more for a random replacement).
TokenBatch mask_batch(const IdMatrix& sequences, double mask_prob, Rng& rng, std::size_t vocab_size,
                      std::string domain_id = {});

/// Concatenates documents (each followed by kBoundaryId) and cuts the stream
/// into non-overlapping windows of `seq_len`; a trailing partial window is
/// dropped. Returned row-major as (count, seq_len).
IdMatrix make_windows(const Corpus& corpus, std::size_t seq_len, std::string_view purpose = "windows");

struct StreamOptions {
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
};

/// Endless stream of masked batches over a corpus. Each epoch reshuffles the
/// windows and redraws the masks; a final partial batch is dropped.
class BatchStream {
 public:
  /// Throws InsufficientDataError if the corpus cannot fill one batch.
  BatchStream(Corpus corpus, StreamOptions options, std::string purpose = "train");

  TokenBatch next();

  std::size_t batches_per_epoch() const noexcept { return windows_.rows / options_.batch_size; }
  std::size_t window_count() const noexcept { return windows_.rows; }
  std::size_t epoch() const noexcept { return epoch_; }
  const Corpus& corpus() const noexcept { return corpus_; }
  const StreamOptions& options() const noexcept { return options_; }

 private:
  void start_epoch();

  Corpus corpus_;
  StreamOptions options_;
  std::string purpose_;
  IdMatrix windows_;
  std::vector<std::size_t> order_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
};

/// Endless stream drawing each batch from corpus k with probability weights[k].
class MixedStream {
 public:
  /// Throws ContractError on negative weights, all-zero weights, a size
  /// mismatch, or weights that do not sum to 1.
  MixedStream(std::vector<Corpus> corpora, std::vector<double> weights, StreamOptions options);

  TokenBatch next();
  /// Index of the corpus the last batch came from.
  std::size_t last_source() const noexcept { return last_; }
  /// Batches in one pass over every member corpus.
  std::size_t batches_per_epoch() const noexcept;
  std::size_t member_count() const noexcept { return streams_.size(); }

 private:
  std::vector<BatchStream> streams_;
  std::vector<double> cumulative_;
  Rng choice_;
  std::size_t last_ = 0;
};

/// Bounded FIFO of batches retained from earlier domains.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  void push(TokenBatch batch);
  /// Next batch in round-robin order over the held batches.
  const TokenBatch& next_replay();

  std::size_t size() const noexcept { return batches_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return batches_.empty(); }
  const std::deque<TokenBatch>& batches() const noexcept { return batches_; }
  std::set<std::string> source_domains() const;
  /// Throws ContractError if any held batch comes from `current_domain`.
  void check_excludes(std::string_view current_domain) const;

 private:
  std::size_t capacity_;
  std::deque<TokenBatch> batches_;
  std::size_t cursor_ = 0;
};

/// Stores the next `n` batches of `source`, evicting the oldest held batches
/// when full. Throws ContractError if n exceeds the buffer capacity.
void buffer_fill(ReplayBuffer& buffer, BatchStream& source, std::size_t n);

}  // namespace calm
