#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace calm {

/// Text families for generated desk corpora.
enum class SynthStyle { prose, code, clinical };

std::optional<SynthStyle> parse_synth_style(std::string_view name);
std::string_view to_string(SynthStyle style);

/// Generates at least `min_bytes` of UTF-8 text in the given style, with
/// documents separated by blank lines. Output is a pure function of
/// (style, min_bytes, seed).
std::string synthesize_corpus(SynthStyle style, std::size_t min_bytes, std::uint64_t seed);

void write_synthetic_corpus(const std::filesystem::path& path, SynthStyle style, std::size_t min_bytes,
                            std::uint64_t seed);

}  // namespace calm
