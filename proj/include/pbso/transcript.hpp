#pragma once

// Reflective-trajectory data model and the round-structured transcript
// format:
//
//   <think>
//   <round>
//   ```lean4
//   <statement>
//   ```
//   <critique ... Correct|Incorrect>
//   </round>
//   ...
//   </think>
//   ```lean4
//   <final statement>
//   ```
//
// The parser tolerates prose outside the markers and several fenced blocks
// inside one round (the last one is the round's statement).

#include <algorithm>
#include <cctype>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pbso/common.hpp"

namespace pbso {

enum class Verdict { Correct, Incorrect };

inline std::string_view to_string(Verdict v) {
  return v == Verdict::Correct ? "Correct" : "Incorrect";
}

inline Verdict verdict_from_string(std::string_view s) {
  if (s == "Correct") return Verdict::Correct;
  if (s == "Incorrect") return Verdict::Incorrect;
  throw InvariantViolation("unknown verdict '" + std::string(s) + "'");
}

struct Question {
  std::string id;
  std::string text;
  friend bool operator==(const Question&, const Question&) = default;
};

struct Iteration {
  std::size_t index = 0;  // 1-based
  std::string statement;
  std::string critique;
  Verdict verdict = Verdict::Incorrect;
  Span statement_span;
  Span critique_span;
  friend bool operator==(const Iteration&, const Iteration&) = default;
};

struct Trajectory {
  std::string question_id;
  std::vector<Iteration> iterations;
  std::string final_statement;
  Span final_span;
  std::size_t token_count = 0;

  std::size_t num_iterations() const { return iterations.size(); }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

// ---------------------------------------------------------------------------
// Tokenization

struct TokenRange {
  std::size_t begin;  // byte offsets, [begin, end)
  std::size_t end;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<TokenRange> tokenize(std::string_view text) const = 0;
};

/// Maximal runs of non-whitespace bytes.
class WhitespaceTokenizer final : public Tokenizer {
 public:
  std::vector<TokenRange> tokenize(std::string_view text) const override {
    std::vector<TokenRange> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
      while (i < n && is_space(text[i])) ++i;
      if (i == n) break;
      std::size_t b = i;
      while (i < n && !is_space(text[i])) ++i;
      out.push_back({b, i});
    }
    return out;
  }

  static bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  }
};

inline const Tokenizer& whitespace_tokenizer() {
  static const WhitespaceTokenizer tok;
  return tok;
}

// ---------------------------------------------------------------------------
// Helpers

namespace detail {

inline bool is_word_char(unsigned char c) {
  return std::isalnum(c) != 0 || c == '_';
}

inline std::string_view trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && WhitespaceTokenizer::is_space(s[b])) ++b;
  while (e > b && WhitespaceTokenizer::is_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

inline bool at_line_start(std::string_view text, std::size_t pos,
                          std::size_t region_begin) {
  return pos == region_begin || pos == 0 || text[pos - 1] == '\n';
}

// Position of the next fence marker (``` preceded only by blanks on its
// line) in [from, to), or npos.
inline std::size_t find_fence(std::string_view text, std::size_t from,
                              std::size_t to, std::size_t region_begin) {
  std::size_t pos = from;
  while (pos < to) {
    std::size_t hit = text.find("```", pos);
    if (hit == std::string_view::npos || hit + 3 > to) return std::string_view::npos;
    std::size_t ls = hit;
    while (ls > region_begin && ls > 0 && (text[ls - 1] == ' ' || text[ls - 1] == '\t'))
      --ls;
    if (at_line_start(text, ls, region_begin)) return hit;
    pos = hit + 3;
  }
  return std::string_view::npos;
}

inline std::size_t line_end(std::string_view text, std::size_t pos, std::size_t to) {
  std::size_t nl = text.find('\n', pos);
  return (nl == std::string_view::npos || nl >= to) ? to : nl;
}

struct FencedBlock {
  std::size_t open;         // offset of the opening ```
  std::string_view content; // body between the fence lines
  std::size_t close_end;    // end of the closing fence line
};

// All fenced blocks in [from, to). Throws on an unclosed fence.
inline std::vector<FencedBlock> fenced_blocks(std::string_view text,
                                              std::size_t from, std::size_t to) {
  std::vector<FencedBlock> blocks;
  std::size_t pos = from;
  while (true) {
    std::size_t open = find_fence(text, pos, to, from);
    if (open == std::string_view::npos) break;
    std::size_t open_eol = line_end(text, open, to);
    std::size_t body = open_eol < to ? open_eol + 1 : to;
    std::size_t close = find_fence(text, body, to, from);
    if (close == std::string_view::npos)
      throw MalformedTranscript("unclosed fenced block", open);
    std::size_t line_start = close;
    while (line_start > body && text[line_start - 1] != '\n') --line_start;
    std::size_t body_end = std::max(body, line_start);
    std::size_t close_end = line_end(text, close, to);
    blocks.push_back({open, text.substr(body, body_end - body), close_end});
    pos = close_end;
  }
  return blocks;
}

inline bool has_fence_line(std::string_view s) {
  return find_fence(s, 0, s.size(), 0) != std::string_view::npos;
}

}  // namespace detail

/// Last standalone occurrence of `Correct` or `Incorrect` in `text`.
inline std::optional<Verdict> find_verdict(std::string_view text) {
  std::optional<Verdict> found;
  std::size_t best = 0;
  for (Verdict v : {Verdict::Correct, Verdict::Incorrect}) {
    std::string_view word = to_string(v);
    std::size_t pos = text.size();
    while (true) {
      std::size_t hit = text.rfind(word, pos);
      if (hit == std::string_view::npos) break;
      bool left_ok = hit == 0 ||
                     !detail::is_word_char(static_cast<unsigned char>(text[hit - 1]));
      std::size_t after = hit + word.size();
      bool right_ok = after == text.size() ||
                      !detail::is_word_char(static_cast<unsigned char>(text[after]));
      if (left_ok && right_ok) {
        if (!found || hit > best) {
          found = v;
          best = hit;
        }
        break;
      }
      if (hit == 0) break;
      pos = hit - 1;
    }
  }
  return found;
}

// ---------------------------------------------------------------------------
// Validation

/// Structural invariants that do not involve token spans.
inline void validate_structure(const Trajectory& t) {
  const std::size_t n = t.iterations.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Iteration& it = t.iterations[i];
    if (it.index != i + 1)
      throw InvariantViolation("iteration indices must be 1..T consecutive");
    if (it.verdict == Verdict::Correct && i + 1 != n)
      throw InvariantViolation("verdict Correct at non-final iteration " +
                               std::to_string(i + 1));
  }
}

inline void validate_spans(const Trajectory& t) {
  std::size_t cursor = 0;
  for (const Iteration& it : t.iterations) {
    const Span& s = it.statement_span;
    const Span& c = it.critique_span;
    if (s.begin > s.end || c.begin > c.end || s.begin < cursor || s.end > c.begin)
      throw InvariantViolation("iteration " + std::to_string(it.index) +
                               " spans are out of order");
    cursor = c.end;
  }
  const Span& f = t.final_span;
  if (f.begin > f.end || f.begin < cursor || f.end > t.token_count)
    throw InvariantViolation("final span must follow all iteration spans");
}

inline void validate(const Trajectory& t) {
  validate_structure(t);
  validate_spans(t);
}

// ---------------------------------------------------------------------------
// Parsing

inline Trajectory parse_transcript(std::string_view text,
                                   const Tokenizer& tokenizer = whitespace_tokenizer()) {
  using detail::trim;
  constexpr std::string_view kThinkOpen = "<think>", kThinkClose = "</think>";
  constexpr std::string_view kRoundOpen = "<round>", kRoundClose = "</round>";

  std::size_t think_open = text.find(kThinkOpen);
  if (think_open == std::string_view::npos)
    throw MalformedTranscript("missing <think>", 0);
  std::size_t think_body = think_open + kThinkOpen.size();
  std::size_t think_close = text.find(kThinkClose, think_body);
  if (think_close == std::string_view::npos)
    throw MalformedTranscript("missing </think>", text.size());

  struct RawRound {
    std::size_t open, close_end, stmt_end;
    std::string statement, critique;
    Verdict verdict;
  };
  std::vector<RawRound> rounds;

  std::size_t pos = think_body;
  while (true) {
    std::size_t open = text.find(kRoundOpen, pos);
    if (open == std::string_view::npos || open >= think_close) break;
    std::size_t body = open + kRoundOpen.size();
    std::size_t close = text.find(kRoundClose, body);
    if (close == std::string_view::npos || close > think_close)
      throw MalformedTranscript("unterminated <round>", open);
    std::size_t nested = text.find(kRoundOpen, body);
    if (nested != std::string_view::npos && nested < close)
      throw MalformedTranscript("nested <round>", nested);

    auto blocks = detail::fenced_blocks(text, body, close);
    if (blocks.empty())
      throw MalformedTranscript("round without a fenced statement block", open);
    const auto& stmt = blocks.back();
    std::string_view critique = trim(text.substr(stmt.close_end, close - stmt.close_end));
    auto verdict = find_verdict(critique);
    if (!verdict)
      throw MalformedTranscript("round without a Correct/Incorrect verdict",
                                stmt.close_end);
    rounds.push_back({open, close + kRoundClose.size(), stmt.close_end,
                      std::string(trim(stmt.content)), std::string(critique), *verdict});
    pos = close + kRoundClose.size();
  }

  std::size_t after_think = think_close + kThinkClose.size();
  auto finals = detail::fenced_blocks(text, after_think, text.size());
  if (finals.empty())
    throw MalformedTranscript("no final fenced block after </think>", after_think);

  for (std::size_t i = 0; i + 1 < rounds.size(); ++i)
    if (rounds[i].verdict == Verdict::Correct)
      throw MalformedTranscript("verdict Correct before the last round", rounds[i].open);

  const auto tokens = tokenizer.tokenize(text);
  auto tok = [&](std::size_t offset) {
    return static_cast<std::size_t>(
        std::lower_bound(tokens.begin(), tokens.end(), offset,
                         [](const TokenRange& r, std::size_t o) { return r.begin < o; }) -
        tokens.begin());
  };

  Trajectory traj;
  traj.token_count = tokens.size();
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    RawRound& r = rounds[i];
    Iteration it;
    it.index = i + 1;
    it.statement = std::move(r.statement);
    it.critique = std::move(r.critique);
    it.verdict = r.verdict;
    it.statement_span = {tok(r.open), tok(r.stmt_end)};
    it.critique_span = {it.statement_span.end, tok(r.close_end)};
    traj.iterations.push_back(std::move(it));
  }
  traj.final_statement = std::string(trim(finals.front().content));
  traj.final_span = {tok(after_think), traj.token_count};
  return traj;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline void check_renderable(std::string_view field, std::string_view what,
                             std::size_t index) {
  auto fail = [&](const std::string& why) {
    throw InvariantViolation(std::string(what) + " of iteration " +
                             std::to_string(index) + " " + why);
  };
  if (trim(field) != field) fail("has leading or trailing whitespace");
  if (has_fence_line(field)) fail("contains a fence line");
  for (std::string_view marker : {"<think>", "</think>", "<round>", "</round>"})
    if (field.find(marker) != std::string_view::npos)
      fail("contains marker " + std::string(marker));
}

}  // namespace detail

/// Canonical serialization; `parse_transcript(render_transcript(t))`
/// reproduces the content of `t` and its canonical spans.
inline std::string render_transcript(const Trajectory& traj) {
  validate_structure(traj);
  std::string out = "<think>\n";
  for (const Iteration& it : traj.iterations) {
    detail::check_renderable(it.statement, "statement", it.index);
    detail::check_renderable(it.critique, "critique", it.index);
    auto v = find_verdict(it.critique);
    if (!v || *v != it.verdict)
      throw InvariantViolation("critique of iteration " + std::to_string(it.index) +
                               " must end with its verdict word");
    out += "<round>\n```lean4\n";
    out += it.statement;
    out += "\n```\n";
    out += it.critique;
    out += "\n</round>\n";
  }
  detail::check_renderable(traj.final_statement, "final statement", 0);
  out += "</think>\n```lean4\n";
  out += traj.final_statement;
  out += "\n```\n";
  return out;
}

/// Content-equal trajectory carrying the spans of its canonical rendering.
inline Trajectory canonicalize(const Trajectory& traj,
                               const Tokenizer& tokenizer = whitespace_tokenizer()) {
  Trajectory out = parse_transcript(render_transcript(traj), tokenizer);
  out.question_id = traj.question_id;
  return out;
}

/// Content fields only (spans are not compared).
inline bool same_content(const Trajectory& a, const Trajectory& b) {
  if (a.question_id != b.question_id || a.final_statement != b.final_statement ||
      a.iterations.size() != b.iterations.size())
    return false;
  for (std::size_t i = 0; i < a.iterations.size(); ++i) {
    const auto& x = a.iterations[i];
    const auto& y = b.iterations[i];
    if (x.index != y.index || x.statement != y.statement || x.critique != y.critique ||
        x.verdict != y.verdict)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Segmentation

enum class SegmentKind { Iteration, Final };

struct Segment {
  SegmentKind kind;
  std::size_t position;  // 1-based; T+1 for the final segment
  Span span;
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// T+1 contiguous segments partitioning [first credited token, token_count).
/// Iteration t owns everything from its statement up to the next segment,
/// including interstitial prose and the closing markers.
inline std::vector<Segment> segment_spans(const Trajectory& traj) {
  validate(traj);
  const std::size_t n = traj.iterations.size();
  std::vector<Segment> segs;
  segs.reserve(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t next = i + 1 < n ? traj.iterations[i + 1].statement_span.begin
                                 : traj.final_span.begin;
    segs.push_back({SegmentKind::Iteration, i + 1,
                    {traj.iterations[i].statement_span.begin, next}});
  }
  segs.push_back({SegmentKind::Final, n + 1, {traj.final_span.begin, traj.token_count}});
  return segs;
}

// ---------------------------------------------------------------------------
// JSONL serialization: {question_id, iterations:[{index, statement, critique,
// verdict}], final_statement}

inline nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json its = nlohmann::json::array();
  for (const Iteration& it : t.iterations)
    its.push_back({{"index", it.index},
                   {"statement", it.statement},
                   {"critique", it.critique},
                   {"verdict", std::string(to_string(it.verdict))}});
  return {{"question_id", t.question_id},
          {"iterations", std::move(its)},
          {"final_statement", t.final_statement}};
}

/// Reads the content fields and recomputes canonical spans.
inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  try {
    t.question_id = j.at("question_id").get<std::string>();
    for (const auto& ij : j.at("iterations")) {
      Iteration it;
      it.index = ij.at("index").get<std::size_t>();
      it.statement = ij.at("statement").get<std::string>();
      it.critique = ij.at("critique").get<std::string>();
      it.verdict = verdict_from_string(ij.at("verdict").get<std::string>());
      t.iterations.push_back(std::move(it));
    }
    t.final_statement = j.at("final_statement").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw InvariantViolation(std::string("bad trajectory record: ") + e.what());
  }
  return canonicalize(t);
}

}  // namespace pbso
