// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/event_codec.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace expertflow {

namespace {

constexpr int kMaxIntDigitsDecode = 7;  // overflow guard, not a format rule

// Deciseconds on the one-decimal grid, or nullopt if off-grid.
std::optional<std::int64_t> to_deciseconds(double seconds) {
  if (!(seconds >= 0.0) || !std::isfinite(seconds)) return std::nullopt;
  double scaled = seconds * 10.0;
  auto ds = static_cast<std::int64_t>(std::llround(scaled));
  if (std::abs(scaled - static_cast<double>(ds)) > 1e-6) return std::nullopt;
  return ds;
}

}  // namespace

std::string ParseError::to_string() const {
  std::ostringstream os;
  os << "parse error at token " << index << ": expected " << expected << " (" << message << ")";
  return os.str();
}

std::optional<std::string> validate_sequence(const EventSequence& seq) {
  double prev_end = 0.0;
  for (size_t i = 0; i < seq.events.size(); ++i) {
    const Event& e = seq.events[i];
    auto start = to_deciseconds(e.start_s);
    auto end = to_deciseconds(e.end_s);
    if (!start) return "event " + std::to_string(i) + ": start time not on the 0.1s grid or negative";
    if (!end) return "event " + std::to_string(i) + ": end time not on the 0.1s grid or negative";
    if (*end <= *start) return "event " + std::to_string(i) + ": end must exceed start";
    if (i > 0 && e.start_s < prev_end)
      return "event " + std::to_string(i) + ": overlaps or precedes the previous event";
    if (e.saliency < 0 || e.saliency > 4)
      return "event " + std::to_string(i) + ": saliency outside 0..4";
    if (e.caption.empty()) return "event " + std::to_string(i) + ": empty caption";
    for (int id : e.caption)
      if (id < 0) return "event " + std::to_string(i) + ": negative caption token id";
    prev_end = e.end_s;
  }
  return std::nullopt;
}

std::vector<int> format_number(double value, NumberKind kind) {
  if (kind == NumberKind::Score) {
    double r = std::round(value);
    if (std::abs(value - r) > 1e-9 || r < 0.0 || r > 4.0)
      throw std::domain_error("format_number: score must be an integer in 0..4");
    return {static_cast<int>(r)};
  }
  auto ds = to_deciseconds(value);
  if (!ds) throw std::domain_error("format_number: time must be >= 0 and on the 0.1s grid");
  std::string digits = std::to_string(*ds / 10);
  std::vector<int> out;
  out.reserve(digits.size() + 2);
  for (char c : digits) out.push_back(c - '0');
  out.push_back(kTokenDot);
  out.push_back(static_cast<int>(*ds % 10));
  return out;
}

TokenStream encode_events(const EventSequence& seq) {
  if (auto why = validate_sequence(seq))
    throw std::domain_error("encode_events: " + *why);
  TokenStream out;
  for (const Event& e : seq.events) {
    for (int id : format_number(e.start_s, NumberKind::Time)) out.push_back({id, TaskType::Time});
    out.push_back({kTokenSep, TaskType::Sep});
    for (int id : format_number(e.end_s, NumberKind::Time)) out.push_back({id, TaskType::Time});
    out.push_back({kTokenSync, TaskType::Sync});
    out.push_back({e.saliency, TaskType::Score});
    out.push_back({kTokenSync, TaskType::Sync});
    for (int id : e.caption) out.push_back({kTextBase + id, TaskType::Text});
    out.push_back({kTokenSync, TaskType::Sync});
  }
  out.push_back({kTokenEos, TaskType::Eos});
  return out;
}

EventCursor::EventCursor() = default;

bool EventCursor::fail(ParseError* err, const std::string& expected, const std::string& message) {
  if (err) {
    err->index = pos_;
    err->expected = expected;
    err->message = message;
  }
  return false;
}

bool EventCursor::int_prefix_feasible(std::int64_t prefix, int digits_used, int max_digits,
                                      std::int64_t bound) {
  // Best completion: pad the integer part with 9s up to the budget, then
  // take decimal digit 9.
  std::int64_t best = prefix;
  for (int k = digits_used; k < max_digits; ++k) best = best * 10 + 9;
  return best * 10 + 9 >= bound;
}

bool EventCursor::feed(int id, ParseError* err) {
  const size_t at = pos_;
  (void)at;
  bool is_digit = id >= 0 && id <= 9;
  switch (state_) {
    case State::EventStartOrEos:
      if (id == kTokenEos) {
        last_tag_ = TaskType::Eos;
        state_ = State::Done;
        break;
      }
      if (!is_digit) return fail(err, "time digit or <eos>", "event must begin with a start time");
      cur_int_ = id;
      int_digits_ = 1;
      leading_zero_ = (id == 0);
      last_tag_ = TaskType::Time;
      state_ = State::StartInt;
      break;
    case State::StartInt:
    case State::EndInt:
      if (id == kTokenDot) {
        last_tag_ = TaskType::Time;
        state_ = (state_ == State::StartInt) ? State::StartFrac : State::EndFrac;
        break;
      }
      if (!is_digit) return fail(err, "time digit or '.'", "unterminated number");
      if (leading_zero_) return fail(err, "'.'", "leading zero in a timestamp");
      if (int_digits_ >= kMaxIntDigitsDecode) return fail(err, "'.'", "timestamp too long");
      cur_int_ = cur_int_ * 10 + id;
      ++int_digits_;
      last_tag_ = TaskType::Time;
      break;
    case State::EndFirst:
      if (!is_digit) return fail(err, "time digit", "end time required after <sep>");
      cur_int_ = id;
      int_digits_ = 1;
      leading_zero_ = (id == 0);
      last_tag_ = TaskType::Time;
      state_ = State::EndInt;
      break;
    case State::StartFrac: {
      if (!is_digit) return fail(err, "decimal digit", "one decimal digit required after '.'");
      std::int64_t value = cur_int_ * 10 + id;
      if (value < bound_ds_)
        return fail(err, "a later start time",
                    "event starts before the previous event ends");
      start_ds_ = value;
      cur_event_.start_s = static_cast<double>(value) / 10.0;
      last_tag_ = TaskType::Time;
      state_ = State::AfterStart;
      break;
    }
    case State::EndFrac: {
      if (!is_digit) return fail(err, "decimal digit", "one decimal digit required after '.'");
      std::int64_t value = cur_int_ * 10 + id;
      if (value <= start_ds_) return fail(err, "an end time after the start", "start >= end");
      cur_event_.end_s = static_cast<double>(value) / 10.0;
      bound_ds_ = value;  // next event must start at or after this end
      last_tag_ = TaskType::Time;
      state_ = State::AfterEnd;
      break;
    }
    case State::AfterStart:
      if (id != kTokenSep) return fail(err, "<sep>", "separator required between timestamps");
      last_tag_ = TaskType::Sep;
      state_ = State::EndFirst;
      break;
    case State::AfterEnd:
      if (id != kTokenSync) return fail(err, "<sync>", "<sync> required after the timestamps");
      last_tag_ = TaskType::Sync;
      state_ = State::ScoreDigit;
      break;
    case State::ScoreDigit:
      if (!is_digit || id > 4) return fail(err, "score digit 0..4", "saliency outside 0..4");
      cur_event_.saliency = id;
      last_tag_ = TaskType::Score;
      state_ = State::AfterScore;
      break;
    case State::AfterScore:
      if (id != kTokenSync) return fail(err, "<sync>", "<sync> required after the score");
      last_tag_ = TaskType::Sync;
      state_ = State::CaptionFirst;
      caption_len_ = 0;
      cur_event_.caption.clear();
      break;
    case State::CaptionFirst:
      if (id < kTextBase) return fail(err, "text token", "caption must be nonempty");
      cur_event_.caption.push_back(id - kTextBase);
      ++caption_len_;
      last_tag_ = TaskType::Text;
      state_ = State::CaptionMore;
      break;
    case State::CaptionMore:
      if (id == kTokenSync) {
        last_tag_ = TaskType::Sync;
        seq_.events.push_back(cur_event_);
        cur_event_ = Event{};
        state_ = State::EventStartOrEos;
        break;
      }
      if (id < kTextBase) return fail(err, "text token or <sync>", "reserved token inside a caption");
      cur_event_.caption.push_back(id - kTextBase);
      ++caption_len_;
      last_tag_ = TaskType::Text;
      break;
    case State::Done:
      return fail(err, "end of stream", "tokens after <eos>");
  }
  ++pos_;
  return true;
}

HeadKind EventCursor::head() const {
  switch (state_) {
    case State::ScoreDigit:
    case State::AfterScore:
      return HeadKind::Score;
    case State::CaptionFirst:
    case State::CaptionMore:
      return HeadKind::Text;
    default:
      return HeadKind::Time;
  }
}

std::vector<int> EventCursor::legal_next(const GenLimits& limits) const {
  std::vector<int> out;
  auto digits_with_bound = [&](std::int64_t bound, int used, std::int64_t prefix,
                               bool first_digit) {
    for (int d = 0; d <= 9; ++d) {
      if (first_digit) {
        if (d == 0) {
          // Integer part locked to 0; reachable values are 0..9 ds.
          if (9 >= bound) out.push_back(d);
        } else if (int_prefix_feasible(d, 1, limits.max_int_digits, bound)) {
          out.push_back(d);
        }
      } else {
        if (used >= limits.max_int_digits) break;
        if (int_prefix_feasible(prefix * 10 + d, used + 1, limits.max_int_digits, bound))
          out.push_back(d);
      }
    }
  };
  switch (state_) {
    case State::EventStartOrEos:
      if (seq_.events.size() < static_cast<size_t>(limits.max_events))
        digits_with_bound(bound_ds_, 0, 0, true);
      out.push_back(kTokenEos);
      break;
    case State::StartInt:
    case State::EndInt: {
      std::int64_t bound = (state_ == State::StartInt) ? bound_ds_ : start_ds_ + 1;
      if (!leading_zero_) digits_with_bound(bound, int_digits_, cur_int_, false);
      if (cur_int_ * 10 + 9 >= bound) out.push_back(kTokenDot);
      break;
    }
    case State::EndFirst:
      digits_with_bound(start_ds_ + 1, 0, 0, true);
      break;
    case State::StartFrac:
      for (int d = 0; d <= 9; ++d)
        if (cur_int_ * 10 + d >= bound_ds_) out.push_back(d);
      break;
    case State::EndFrac:
      for (int d = 0; d <= 9; ++d)
        if (cur_int_ * 10 + d > start_ds_) out.push_back(d);
      break;
    case State::AfterStart:
      out.push_back(kTokenSep);
      break;
    case State::AfterEnd:
    case State::AfterScore:
      out.push_back(kTokenSync);
      break;
    case State::ScoreDigit:
      for (int d = 0; d <= 4; ++d) out.push_back(d);
      break;
    case State::CaptionFirst:
      for (int v = 0; v < limits.text_vocab; ++v) out.push_back(kTextBase + v);
      break;
    case State::CaptionMore:
      if (caption_len_ < limits.max_caption_len)
        for (int v = 0; v < limits.text_vocab; ++v) out.push_back(kTextBase + v);
      out.push_back(kTokenSync);
      break;
    case State::Done:
      break;
  }
  return out;
}

DecodeResult decode_events(const TokenStream& stream) {
  DecodeResult res;
  EventCursor cursor;
  for (const Token& tok : stream) {
    if (cursor.finished()) {
      res.error = {cursor.position(), "end of stream", "tokens after <eos>"};
      return res;
    }
    if (!cursor.feed(tok.id, &res.error)) return res;
  }
  if (!cursor.finished()) {
    res.error = {stream.size(), "more tokens", "truncated stream (no <eos>)"};
    return res;
  }
  res.sequence = cursor.sequence();
  return res;
}

DecodeResult retag(const std::vector<int>& ids, std::vector<TaskType>* tags_out) {
  DecodeResult res;
  EventCursor cursor;
  if (tags_out) tags_out->clear();
  for (int id : ids) {
    if (cursor.finished()) {
      res.error = {cursor.position(), "end of stream", "tokens after <eos>"};
      return res;
    }
    if (!cursor.feed(id, &res.error)) return res;
    if (tags_out) tags_out->push_back(cursor.last_tag());
  }
  if (!cursor.finished()) {
    res.error = {ids.size(), "more tokens", "truncated stream (no <eos>)"};
    return res;
  }
  res.sequence = cursor.sequence();
  return res;
}

int head_width(HeadKind head, int text_vocab) {
  return head == HeadKind::Text ? text_vocab + 2 : kStructuredVocab;
}

int head_column_for_token(HeadKind head, int token_id, int text_vocab) {
  if (head == HeadKind::Text) {
    if (token_id == kTokenSync) return text_vocab;
    if (token_id == kTokenEos) return text_vocab + 1;
    if (token_id >= kTextBase && token_id < kTextBase + text_vocab) return token_id - kTextBase;
    throw std::invalid_argument("token id " + std::to_string(token_id) +
                                " is not representable by the text head");
  }
  if (token_id < 0 || token_id >= kStructuredVocab)
    throw std::invalid_argument("token id " + std::to_string(token_id) +
                                " is not representable by a structured head");
  return token_id;
}

int token_for_head_column(HeadKind head, int column, int text_vocab) {
  if (head == HeadKind::Text) {
    if (column == text_vocab) return kTokenSync;
    if (column == text_vocab + 1) return kTokenEos;
    if (column >= 0 && column < text_vocab) return kTextBase + column;
    throw std::invalid_argument("text head column out of range");
  }
  if (column < 0 || column >= kStructuredVocab)
    throw std::invalid_argument("structured head column out of range");
  return column;
}

}  // namespace expertflow
