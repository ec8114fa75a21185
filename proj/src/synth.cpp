#include "calm/synth.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <span>
#include <vector>

#include "calm/error.hpp"
#include "calm/rng.hpp"

namespace calm {

namespace {

using Words = std::span<const std::string_view>;

// Skewed pick: low indices are drawn far more often, giving the heavy-tailed
// word frequencies of natural text.
std::string_view pick(Rng& rng, Words words) {
  const double u = rng.uniform();
  const auto i = static_cast<std::size_t>(static_cast<double>(words.size()) * u * u);
  return words[std::min(i, words.size() - 1)];
}

std::string_view pick_flat(Rng& rng, Words words) { return words[rng.below(words.size())]; }

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

// --- prose -----------------------------------------------------------------

constexpr std::array<std::string_view, 64> kNouns = {
    "house",   "river",   "garden", "letter",  "morning", "window",  "village", "road",    "friend",  "mother",
    "story",   "city",    "winter", "summer",  "field",   "child",   "teacher", "market",  "evening", "door",
    "mountain", "forest", "table",  "kitchen", "school",  "train",   "station", "voice",   "street",  "harbor",
    "painter", "doctor",  "sister", "brother", "dog",     "horse",   "bridge",  "lake",    "book",    "song",
    "journey", "promise", "memory", "silence", "stranger", "crowd",  "castle",  "island",  "ship",    "captain",
    "farmer",  "widow",   "lantern", "orchard", "meadow", "church",  "bakery",  "clock",   "storm",   "shadow",
    "valley",  "neighbor", "poet",  "visitor"};
constexpr std::array<std::string_view, 40> kAdjectives = {
    "old",    "quiet",  "bright",  "small",   "cold",    "warm",   "distant", "gentle", "heavy",  "narrow",
    "golden", "empty",  "strange", "familiar", "green",  "tired",  "young",   "careful", "sudden", "patient",
    "broken", "silver", "crowded", "lonely",  "ancient", "pale",   "wide",    "proud",  "simple", "hidden",
    "quick",  "soft",   "dark",    "long",    "early",   "late",   "noisy",   "still",  "kind",   "grey"};
constexpr std::array<std::string_view, 48> kVerbs = {
    "walked to",   "looked at",    "remembered", "opened",     "left",       "found",     "carried",  "watched",
    "followed",    "painted",      "crossed",    "visited",    "admired",    "described", "closed",   "answered",
    "waited for",  "returned to",  "passed",     "noticed",    "loved",      "forgot",    "reached",  "built",
    "wrote about", "listened to",  "sold",       "bought",     "cleaned",    "repaired",  "hid",      "searched",
    "greeted",     "thanked",      "avoided",    "photographed", "measured", "borrowed",  "lost",     "dreamed of",
    "sang about",  "talked about", "pointed at", "ran past",   "climbed",    "explored",  "guarded",  "shared"};
constexpr std::array<std::string_view, 20> kAdverbs = {
    "slowly",  "quietly", "again",      "carefully", "suddenly", "happily", "once",     "later",  "often", "never",
    "finally", "gently",  "reluctantly", "eagerly",  "silently", "proudly", "together", "alone",  "early", "soon"};
constexpr std::array<std::string_view, 14> kPrepositions = {"near",   "behind", "beyond", "under",   "across",
                                                            "beside", "inside", "above",  "through", "around",
                                                            "along",  "past",   "toward", "without"};
constexpr std::array<std::string_view, 24> kNames = {
    "Anna",   "Thomas", "Clara", "Henry",  "Marta", "Oliver", "Rosa",   "Samuel", "Elena", "Victor", "Lucy",   "Peter",
    "Helena", "Arthur", "Ines",  "Walter", "Nora",  "Felix",  "Greta",  "Hugo",   "Ida",   "Jonas",  "Lena",   "Max"};
constexpr std::array<std::string_view, 12> kConnectives = {
    "Then",      "Later that day", "In the end", "Meanwhile", "After a while", "Years later",
    "That night", "By morning",    "Still",      "Of course", "Even so",       "Before long"};

std::string noun_phrase(Rng& rng) {
  std::string s = "the ";
  if (rng.uniform() < 0.55) {
    s += pick(rng, kAdjectives);
    s += ' ';
  }
  s += pick(rng, kNouns);
  return s;
}

std::string prose_sentence(Rng& rng) {
  std::string s;
  const double u = rng.uniform();
  if (u < 0.2) {
    s = std::string(pick_flat(rng, kConnectives)) + ", ";
  }
  std::string subject = rng.uniform() < 0.45 ? std::string(pick(rng, kNames)) : noun_phrase(rng);
  s += s.empty() ? capitalize(subject) : subject;
  s += ' ';
  if (rng.uniform() < 0.3) {
    s += pick(rng, kAdverbs);
    s += ' ';
  }
  s += pick(rng, kVerbs);
  s += ' ';
  s += noun_phrase(rng);
  if (rng.uniform() < 0.5) {
    s += ' ';
    s += pick(rng, kPrepositions);
    s += ' ';
    s += noun_phrase(rng);
  }
  if (rng.uniform() < 0.25) {
    s += rng.uniform() < 0.5 ? ", and " : ", but ";
    s += rng.uniform() < 0.5 ? "she " : "he ";
    s += pick(rng, kVerbs);
    s += ' ';
    s += noun_phrase(rng);
  }
  const double end = rng.uniform();
  s += end < 0.85 ? "." : (end < 0.95 ? "!" : "?");
  return s;
}

std::string prose_document(Rng& rng) {
  std::string doc;
  const std::size_t sentences = 3 + rng.below(6);
  std::size_t line_len = 0;
  for (std::size_t i = 0; i < sentences; ++i) {
    const std::string s = prose_sentence(rng);
    if (i > 0) {
      if (line_len + s.size() > 78) {
        doc += '\n';
        line_len = 0;
      } else {
        doc += ' ';
        ++line_len;
      }
    }
    doc += s;
    line_len += s.size();
  }
  return doc;
}

// --- code ------------------------------------------------------------------

constexpr std::array<std::string_view, 24> kIdentParts = {
    "buf", "len", "idx", "node", "count", "value", "ptr",  "key",  "size", "data",  "next",  "head",
    "tmp", "res", "off", "flag", "item",  "list",  "hash", "mask", "pos",  "state", "entry", "table"};
constexpr std::array<std::string_view, 8> kTypes = {"int",      "size_t",  "double", "uint32_t",
                                                    "uint8_t *", "bool",   "char *", "struct node *"};
constexpr std::array<std::string_view, 12> kFuncVerbs = {"get",  "set",   "init", "free",  "find", "push",
                                                         "pop",  "parse", "read", "write", "hash", "reset"};
constexpr std::array<std::string_view, 8> kOps = {"+", "-", "*", "<<", ">>", "&", "|", "^"};
constexpr std::array<std::string_view, 6> kCmp = {"<", ">", "==", "!=", "<=", ">="};

std::string ident(Rng& rng) {
  std::string s(pick(rng, kIdentParts));
  if (rng.uniform() < 0.4) {
    s += '_';
    s += pick(rng, kIdentParts);
  }
  return s;
}

std::string number(Rng& rng) {
  if (rng.uniform() < 0.2) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s = "0x";
    for (int i = 0; i < 2 + static_cast<int>(rng.below(3)); ++i) s += kHex[rng.below(16)];
    return s;
  }
  return std::to_string(rng.below(rng.uniform() < 0.7 ? 10 : 1024));
}

std::string expr(Rng& rng, int depth = 0) {
  const double u = rng.uniform();
  if (depth > 1 || u < 0.35) return rng.uniform() < 0.6 ? ident(rng) : number(rng);
  if (u < 0.5) return ident(rng) + "[" + ident(rng) + "]";
  if (u < 0.6) return ident(rng) + "->" + ident(rng);
  if (u < 0.7) return std::string(pick_flat(rng, kFuncVerbs)) + "_" + ident(rng) + "(" + expr(rng, depth + 1) + ")";
  return "(" + expr(rng, depth + 1) + " " + std::string(pick_flat(rng, kOps)) + " " + expr(rng, depth + 1) + ")";
}

void code_block(Rng& rng, std::string& out, int indent, int depth) {
  const std::string pad(static_cast<std::size_t>(indent) * 4, ' ');
  const std::size_t statements = 1 + rng.below(depth == 0 ? 5 : 3);
  for (std::size_t i = 0; i < statements; ++i) {
    const double u = rng.uniform();
    if (depth < 2 && u < 0.18) {
      const std::string var = std::string(1, "ijk"[depth]);
      out += pad + "for (" + (rng.uniform() < 0.5 ? "int " : "size_t ") + var + " = 0; " + var + " < " + ident(rng) +
             "; ++" + var + ") {\n";
      code_block(rng, out, indent + 1, depth + 1);
      out += pad + "}\n";
    } else if (depth < 2 && u < 0.34) {
      out += pad + "if (" + expr(rng) + " " + std::string(pick_flat(rng, kCmp)) + " " + expr(rng) + ") {\n";
      code_block(rng, out, indent + 1, depth + 1);
      if (rng.uniform() < 0.35) {
        out += pad + "} else {\n";
        code_block(rng, out, indent + 1, depth + 1);
      }
      out += pad + "}\n";
    } else if (u < 0.42) {
      out += pad + "// " + std::string(pick_flat(rng, kFuncVerbs)) + " the " + ident(rng) + " " +
             (rng.uniform() < 0.5 ? "before returning" : "if needed") + "\n";
    } else if (u < 0.52) {
      out += pad + std::string(pick_flat(rng, kFuncVerbs)) + "_" + ident(rng) + "(" + expr(rng) + ", " + expr(rng) +
             ");\n";
    } else if (u < 0.62) {
      out += pad + std::string(pick(rng, kTypes)) + " " + ident(rng) + " = " + expr(rng) + ";\n";
    } else {
      out += pad + ident(rng) + " " + (rng.uniform() < 0.7 ? "=" : "+=") + " " + expr(rng) + ";\n";
    }
  }
}

std::string code_document(Rng& rng) {
  std::string doc;
  if (rng.uniform() < 0.3) {
    std::string name(pick(rng, kIdentParts));
    for (char& c : name) c = static_cast<char>(c - 'a' + 'A');
    doc += "#define MAX_" + name + " " + number(rng) + "\n";
  }
  doc += "static " + std::string(pick(rng, kTypes)) + " " + std::string(pick_flat(rng, kFuncVerbs)) + "_" +
         ident(rng) + "(";
  const std::size_t args = rng.below(4);
  for (std::size_t i = 0; i < args; ++i) {
    if (i) doc += ", ";
    doc += std::string(pick(rng, kTypes)) + " " + ident(rng);
  }
  if (args == 0) doc += "void";
  doc += ")\n{\n";
  code_block(rng, doc, 1, 0);
  doc += "    return " + expr(rng) + ";\n}";
  return doc;
}

// --- clinical --------------------------------------------------------------

constexpr std::array<std::string_view, 16> kComplaints = {
    "chest pain", "shortness of breath", "abdominal pain", "fever",    "headache",  "dizziness",
    "cough",      "back pain",           "syncope",        "weakness", "nausea",    "palpitations",
    "fall",       "confusion",           "leg swelling",   "rash"};
constexpr std::array<std::string_view, 14> kHistory = {"HTN", "DM2",  "CAD", "COPD", "CHF",   "CKD", "AFib",
                                                       "HLD", "asthma", "OSA", "GERD", "hypothyroidism", "CVA", "PVD"};
constexpr std::array<std::string_view, 14> kMeds = {"metoprolol", "lisinopril", "metformin", "atorvastatin",
                                                    "furosemide", "apixaban",   "insulin glargine", "amlodipine",
                                                    "aspirin",    "omeprazole", "levothyroxine", "albuterol",
                                                    "heparin",    "ceftriaxone"};
constexpr std::array<std::string_view, 6> kRoutes = {"PO daily", "PO BID", "PO TID", "IV q8h", "SC qHS", "PO PRN"};
constexpr std::array<std::string_view, 10> kPlans = {
    "cont current meds",        "f/u labs in AM",       "cardiology consult",  "obtain CXR",
    "trend troponin",           "PT/OT eval",           "monitor on tele",     "d/c home when stable",
    "start IV fluids",          "repeat BMP tomorrow"};

std::string clinical_document(Rng& rng) {
  std::string doc = "CC: " + std::string(pick(rng, kComplaints)) + "\n";
  doc += "HPI: " + std::to_string(25 + rng.below(70)) + " yo " + (rng.uniform() < 0.5 ? "M" : "F") + " w/ hx of ";
  const std::size_t hx = 1 + rng.below(3);
  for (std::size_t i = 0; i < hx; ++i) {
    if (i) doc += ", ";
    doc += pick(rng, kHistory);
  }
  doc += " p/w " + std::to_string(1 + rng.below(10)) + " days of " + std::string(pick(rng, kComplaints)) + ". ";
  doc += rng.uniform() < 0.5 ? "Denies fever/chills." : "Pt reports worsening sx at night.";
  doc += "\nVS: BP " + std::to_string(95 + rng.below(80)) + "/" + std::to_string(55 + rng.below(45)) + " HR " +
         std::to_string(50 + rng.below(70)) + " RR " + std::to_string(12 + rng.below(14)) + " T " +
         std::to_string(36 + rng.below(3)) + "." + std::to_string(rng.below(10)) + " SpO2 " +
         std::to_string(86 + rng.below(14)) + "% " + (rng.uniform() < 0.7 ? "RA" : "2L NC") + "\n";
  doc += "MEDS: ";
  const std::size_t meds = 1 + rng.below(4);
  for (std::size_t i = 0; i < meds; ++i) {
    if (i) doc += "; ";
    static constexpr std::array<int, 8> kDoses = {5, 10, 20, 25, 40, 50, 81, 500};
    doc += std::string(pick(rng, kMeds)) + " " + std::to_string(kDoses[rng.below(kDoses.size())]) + " mg " +
           std::string(pick_flat(rng, kRoutes));
  }
  doc += "\nA/P: " + std::string(pick(rng, kComplaints)) + ", likely " + std::string(pick(rng, kHistory)) +
         " related. ";
  const std::size_t plans = 1 + rng.below(3);
  for (std::size_t i = 0; i < plans; ++i) {
    if (i) doc += ", ";
    doc += pick(rng, kPlans);
  }
  doc += ".";
  return doc;
}

}  // namespace

std::optional<SynthStyle> parse_synth_style(std::string_view name) {
  if (name == "prose") return SynthStyle::prose;
  if (name == "code") return SynthStyle::code;
  if (name == "clinical") return SynthStyle::clinical;
  return std::nullopt;
}

std::string_view to_string(SynthStyle style) {
  switch (style) {
    case SynthStyle::prose: return "prose";
    case SynthStyle::code: return "code";
    case SynthStyle::clinical: return "clinical";
  }
  return "unknown";
}

std::string synthesize_corpus(SynthStyle style, std::size_t min_bytes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, to_string(style)));
  std::string out;
  out.reserve(min_bytes + 1024);
  while (out.size() < min_bytes) {
    switch (style) {
      case SynthStyle::prose: out += prose_document(rng); break;
      case SynthStyle::code: out += code_document(rng); break;
      case SynthStyle::clinical: out += clinical_document(rng); break;
    }
    out += "\n\n";
  }
  return out;
}

void write_synthetic_corpus(const std::filesystem::path& path, SynthStyle style, std::size_t min_bytes,
                            std::uint64_t seed) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << synthesize_corpus(style, min_bytes, seed);
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace calm
