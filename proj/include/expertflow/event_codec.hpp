// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Serialization of grounding events into interleaved, task-tagged token
// streams and back.
//
// Fixed token id table (embedded in checkpoints, stable across versions):
//   0-9   digit tokens
//   10    '.'            (the 11 number tokens are 0-9 and '.')
//   11    <sep>          between the two timestamps of an event
//   12    <sync>         after each of the three event fields
//   13    <eos>          stream terminator
//   14+   text vocabulary (caption ids are stored 0-based; stream id = 14+id)
//
// Stream grammar, per event:
//   TIME(start) <sep> TIME(end) <sync> SCORE <sync> TEXT+ <sync>
// events concatenated in order, stream terminated by <eos>. Times render as
// minimal digits, '.', one decimal digit. Scores are a single digit 0-4.

#pragma once

#include "expertflow/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace expertflow {

// Token id table.
inline constexpr int kTokenDot = 10;
inline constexpr int kTokenSep = 11;
inline constexpr int kTokenSync = 12;
inline constexpr int kTokenEos = 13;
inline constexpr int kTextBase = 14;
// Ids 0..13: everything a time or score decoding head can emit.
inline constexpr int kStructuredVocab = 14;

struct Event {
  double start_s = 0.0;  // seconds, one-decimal precision
  double end_s = 0.0;    // seconds, one-decimal precision, > start_s
  int saliency = 0;      // integer score in 0..4
  std::vector<int> caption;  // text-vocabulary ids (0-based, stream id = 14+id)

  bool operator==(const Event&) const = default;
};

struct EventSequence {
  std::vector<Event> events;

  bool operator==(const EventSequence&) const = default;
};

struct Token {
  int id = 0;
  TaskType tag = TaskType::Time;

  bool operator==(const Token&) const = default;
};

using TokenStream = std::vector<Token>;

enum class NumberKind { Time, Score };

// Grammar category of the token expected at a position; selects both the
// decoding head and the embedding table for that position.
enum class HeadKind : std::uint8_t { Time = 0, Score = 1, Text = 2 };

struct ParseError {
  size_t index = 0;         // token position the error was detected at
  std::string expected;     // category the grammar wanted there
  std::string message;

  std::string to_string() const;
};

struct DecodeResult {
  std::optional<EventSequence> sequence;
  ParseError error;  // meaningful only when !sequence

  bool ok() const { return sequence.has_value(); }
};

// Validates the EventSequence invariants: events sorted by start, pairwise
// non-overlapping (next.start >= prev.end), 0 <= start < end, one-decimal
// representable times, saliency in 0..4, nonempty captions of valid text ids.
// Returns an explanation for the first violation, or nullopt if valid.
std::optional<std::string> validate_sequence(const EventSequence& seq);

// Renders one value as number tokens: TIME as minimal digits + '.' + one
// decimal digit, SCORE as a single digit. Throws std::domain_error for
// negative times, times not on the 0.1 grid, or scores outside 0..4.
std::vector<int> format_number(double value, NumberKind kind);

// Event sequence -> token stream. Throws std::domain_error when the sequence
// violates its invariants.
TokenStream encode_events(const EventSequence& seq);

// Token stream -> event sequence. Total: every malformed stream produces a
// structured ParseError instead of an exception.
DecodeResult decode_events(const TokenStream& stream);

// Re-derives the TaskType of each token from ids alone by running the
// grammar; the stored tags of any encode_events output must match.
DecodeResult retag(const std::vector<int>& ids, std::vector<TaskType>* tags_out);

// Caps applied during constrained generation. Decode accepts anything the
// grammar allows; generation additionally bounds field widths so a stream
// always terminates.
struct GenLimits {
  int max_int_digits = 4;    // integer digits per timestamp
  int max_caption_len = 8;   // caption tokens per event
  int max_events = 3;
  int text_vocab = 64;       // caption ids in [0, text_vocab)
};

// Incremental grammar cursor. Drives decode validation, tag re-derivation and
// constrained generation. feed() consumes one token id; legal_next() lists,
// under GenLimits, every id that keeps the stream completable with events that
// satisfy the sequence invariants (end > start, next start >= previous end).
class EventCursor {
 public:
  EventCursor();

  // Consumes a token. On grammar violation, fills `err` (with the running
  // index) and returns false; the cursor is then poisoned.
  bool feed(int id, ParseError* err);

  // Tag assigned to the most recently consumed token.
  TaskType last_tag() const { return last_tag_; }

  // Head that must produce the next token.
  HeadKind head() const;

  std::vector<int> legal_next(const GenLimits& limits) const;

  bool finished() const { return state_ == State::Done; }
  size_t position() const { return pos_; }
  // Number of fully parsed events so far.
  size_t events_done() const { return seq_.events.size(); }

  // Valid once finished().
  const EventSequence& sequence() const { return seq_; }
  // Fully parsed events so far (the in-flight event excluded).
  const EventSequence& partial() const { return seq_; }

 private:
  enum class State {
    EventStartOrEos,  // first digit of a start time, or <eos>
    StartInt,         // inside start integer part
    StartFrac,        // exactly one decimal digit of start
    AfterStart,       // <sep>
    EndFirst,         // first digit of end time
    EndInt,
    EndFrac,
    AfterEnd,         // <sync>
    ScoreDigit,       // single digit 0..4
    AfterScore,       // <sync>
    CaptionFirst,     // first caption token
    CaptionMore,      // caption token or <sync>
    Done,
  };

  bool fail(ParseError* err, const std::string& expected, const std::string& message);
  // Whether some completion of the current partial integer part can reach a
  // value (in deciseconds) >= bound under the digit budget.
  static bool int_prefix_feasible(std::int64_t prefix, int digits_used, int max_digits,
                                  std::int64_t bound);

  State state_ = State::EventStartOrEos;
  TaskType last_tag_ = TaskType::Time;
  size_t pos_ = 0;

  std::int64_t cur_int_ = 0;   // integer part of the number being read
  int int_digits_ = 0;
  bool leading_zero_ = false;
  std::int64_t start_ds_ = 0;  // completed start of the current event, deciseconds
  std::int64_t bound_ds_ = 0;  // minimum value (deciseconds) for the number being read
  int caption_len_ = 0;
  Event cur_event_;
  EventSequence seq_;
};

// Head that emits each structured token id (0..13) plus, for the text head,
// the two trailing columns mapped to <sync> and <eos>.
//   time/score heads: logit column j <-> token id j   (width kStructuredVocab)
//   text head: column j < V <-> text id j; column V <-> <sync>; V+1 <-> <eos>
int head_width(HeadKind head, int text_vocab);
int head_column_for_token(HeadKind head, int token_id, int text_vocab);
int token_for_head_column(HeadKind head, int column, int text_vocab);

}  // namespace expertflow
