// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "expertflow/event_codec.hpp"

#include <random>

using namespace expertflow;

namespace {

EventSequence seq_of(std::initializer_list<Event> events) {
  EventSequence s;
  s.events = events;
  return s;
}

// Random valid sequence on the 0.1 s grid.
EventSequence random_sequence(std::mt19937_64& rng, int text_vocab = 50) {
  std::uniform_int_distribution<int> n_events(0, 3);
  std::uniform_int_distribution<int> gap(0, 40);
  std::uniform_int_distribution<int> len(1, 80);
  std::uniform_int_distribution<int> sal(0, 4);
  std::uniform_int_distribution<int> cap_len(1, 5);
  std::uniform_int_distribution<int> cap_tok(0, text_vocab - 1);
  EventSequence s;
  std::int64_t cursor = 0;
  int m = n_events(rng);
  for (int i = 0; i < m; ++i) {
    Event e;
    cursor += gap(rng);
    e.start_s = static_cast<double>(cursor) / 10.0;
    cursor += len(rng);
    e.end_s = static_cast<double>(cursor) / 10.0;
    e.saliency = sal(rng);
    int n = cap_len(rng);
    for (int j = 0; j < n; ++j) e.caption.push_back(cap_tok(rng));
    s.events.push_back(std::move(e));
  }
  return s;
}

std::vector<int> ids_of(const TokenStream& ts) {
  std::vector<int> ids;
  for (const Token& t : ts) ids.push_back(t.id);
  return ids;
}

}  // namespace

TEST_CASE("format_number renders times as minimal digits dot one decimal") {
  CHECK(format_number(12.5, NumberKind::Time) == std::vector<int>{1, 2, kTokenDot, 5});
  CHECK(format_number(0.0, NumberKind::Time) == std::vector<int>{0, kTokenDot, 0});
  CHECK(format_number(3, NumberKind::Score) == std::vector<int>{3});
  CHECK(format_number(105.0, NumberKind::Time) == std::vector<int>{1, 0, 5, kTokenDot, 0});
}

TEST_CASE("format_number rejects out-of-domain values") {
  CHECK_THROWS_AS(format_number(-1.0, NumberKind::Time), std::domain_error);
  CHECK_THROWS_AS(format_number(1.23, NumberKind::Time), std::domain_error);
  CHECK_THROWS_AS(format_number(5, NumberKind::Score), std::domain_error);
  CHECK_THROWS_AS(format_number(-1, NumberKind::Score), std::domain_error);
  CHECK_THROWS_AS(format_number(2.5, NumberKind::Score), std::domain_error);
}

TEST_CASE("encode_events produces the documented grammar and tags") {
  EventSequence s = seq_of({Event{2.0, 5.5, 3, {7, 12}}});
  TokenStream ts = encode_events(s);
  std::vector<int> want_ids = {2,          kTokenDot, 0,          kTokenSep,  5,  kTokenDot, 5,
                               kTokenSync, 3,         kTokenSync, 21,         26, kTokenSync,
                               kTokenEos};
  CHECK(ids_of(ts) == want_ids);
  std::vector<TaskType> want_tags = {
      TaskType::Time, TaskType::Time, TaskType::Time,  TaskType::Sep,  TaskType::Time,
      TaskType::Time, TaskType::Time, TaskType::Sync,  TaskType::Score, TaskType::Sync,
      TaskType::Text, TaskType::Text, TaskType::Sync,  TaskType::Eos};
  for (size_t i = 0; i < ts.size(); ++i) CHECK(ts[i].tag == want_tags[i]);
}

TEST_CASE("encode of the empty sequence is a bare <eos>") {
  TokenStream ts = encode_events(EventSequence{});
  REQUIRE(ts.size() == 1);
  CHECK(ts[0].id == kTokenEos);
  CHECK(ts[0].tag == TaskType::Eos);
}

TEST_CASE("second event tokens appear strictly after the first sync triple") {
  EventSequence s = seq_of({Event{0.0, 1.0, 1, {4}}, Event{2.0, 3.0, 2, {5}}});
  TokenStream ts = encode_events(s);
  std::vector<int> ids = ids_of(ts);
  int syncs = 0;
  size_t boundary = 0;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kTokenSync && ++syncs == 3) {
      boundary = i;
      break;
    }
  }
  REQUIRE(boundary > 0);
  CHECK(ids[boundary + 1] == 2);  // start digit of the second event
}

TEST_CASE("encode rejects invariant violations") {
  CHECK_THROWS_AS(encode_events(seq_of({Event{5.0, 2.0, 1, {0}}})), std::domain_error);
  CHECK_THROWS_AS(encode_events(seq_of({Event{0.0, 1.0, 9, {0}}})), std::domain_error);
  CHECK_THROWS_AS(encode_events(seq_of({Event{0.0, 1.0, 1, {}}})), std::domain_error);
  CHECK_THROWS_AS(encode_events(seq_of({Event{0.0, 2.0, 1, {0}}, Event{1.0, 3.0, 1, {0}}})),
                  std::domain_error);
}

TEST_CASE("decode inverts encode on crafted sequences") {
  EventSequence s = seq_of({Event{2.0, 5.5, 3, {7, 12}}, Event{6.0, 10.0, 0, {1}}});
  DecodeResult r = decode_events(encode_events(s));
  REQUIRE(r.ok());
  CHECK(*r.sequence == s);
}

TEST_CASE("missing separator is reported at token index 3") {
  // "2.0 <sync> ..." instead of "2.0 <sep> ..."
  TokenStream ts = {{2, TaskType::Time},
                    {kTokenDot, TaskType::Time},
                    {0, TaskType::Time},
                    {kTokenSync, TaskType::Sync}};
  DecodeResult r = decode_events(ts);
  REQUIRE(!r.ok());
  CHECK(r.error.index == 3);
  CHECK(r.error.expected == "<sep>");
}

TEST_CASE("decode rejects malformed numbers and semantic violations") {
  auto ids_to_stream = [](const std::vector<int>& ids) {
    TokenStream ts;
    for (int id : ids) ts.push_back({id, TaskType::Time});
    return ts;
  };
  // leading zero
  DecodeResult r1 = decode_events(ids_to_stream({0, 2, kTokenDot, 0}));
  REQUIRE(!r1.ok());
  CHECK(r1.error.index == 1);
  // end <= start
  DecodeResult r2 = decode_events(ids_to_stream({5, kTokenDot, 0, kTokenSep, 5, kTokenDot, 0,
                                                 kTokenSync, 1, kTokenSync, 20, kTokenSync,
                                                 kTokenEos}));
  REQUIRE(!r2.ok());
  CHECK(r2.error.index == 6);
  // score out of range
  DecodeResult r3 = decode_events(
      ids_to_stream({0, kTokenDot, 0, kTokenSep, 1, kTokenDot, 0, kTokenSync, 7, kTokenSync}));
  REQUIRE(!r3.ok());
  CHECK(r3.error.index == 8);
  // truncated stream
  DecodeResult r4 = decode_events(ids_to_stream({2, kTokenDot}));
  REQUIRE(!r4.ok());
  CHECK(r4.error.index == 2);
  // tokens after <eos>
  DecodeResult r5 = decode_events(ids_to_stream({kTokenEos, 0}));
  REQUIRE(!r5.ok());
  // overlap with the previous event
  DecodeResult r6 = decode_events(ids_to_stream(
      {2, kTokenDot, 0, kTokenSep, 8, kTokenDot, 0, kTokenSync, 1, kTokenSync, 20, kTokenSync,
       1, kTokenDot, 0, kTokenSep, 9, kTokenDot, 0, kTokenSync, 1, kTokenSync, 20, kTokenSync,
       kTokenEos}));
  REQUIRE(!r6.ok());
  CHECK(r6.error.index == 14);
}

TEST_CASE("10000 random valid sequences round-trip bit-exactly") {
  std::mt19937_64 rng(20260809);
  for (int i = 0; i < 10000; ++i) {
    EventSequence s = random_sequence(rng);
    TokenStream ts = encode_events(s);
    DecodeResult r = decode_events(ts);
    REQUIRE(r.ok());
    REQUIRE(*r.sequence == s);
  }
}

TEST_CASE("tags re-derived from ids alone match the stored tags") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 200; ++i) {
    EventSequence s = random_sequence(rng);
    TokenStream ts = encode_events(s);
    std::vector<TaskType> tags;
    DecodeResult r = retag(ids_of(ts), &tags);
    REQUIRE(r.ok());
    REQUIRE(tags.size() == ts.size());
    for (size_t j = 0; j < ts.size(); ++j) CHECK(tags[j] == ts[j].tag);
  }
}

TEST_CASE("decode is total on fuzzed streams") {
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<int> len(0, 40);
  std::uniform_int_distribution<int> tok(0, 70);
  for (int i = 0; i < 20000; ++i) {
    TokenStream ts;
    int n = len(rng);
    for (int j = 0; j < n; ++j) ts.push_back({tok(rng), TaskType::Time});
    DecodeResult r = decode_events(ts);  // must never throw
    if (r.ok()) CHECK(validate_sequence(*r.sequence) == std::nullopt);
  }
}

TEST_CASE("cursor legal_next always leads to parseable completions") {
  // Drive the cursor by always taking the first/last legal token; the stream
  // that results must decode.
  GenLimits limits{3, 4, 2, 20};
  for (int pick_last : {0, 1}) {
    EventCursor cursor;
    TokenStream ts;
    int guard = 0;
    while (!cursor.finished() && guard++ < 200) {
      std::vector<int> legal = cursor.legal_next(limits);
      REQUIRE(!legal.empty());
      int id = pick_last ? legal.back() : legal.front();
      ParseError err;
      REQUIRE(cursor.feed(id, &err));
      ts.push_back({id, cursor.last_tag()});
    }
    REQUIRE(cursor.finished());
    DecodeResult r = decode_events(ts);
    REQUIRE(r.ok());
  }
}

TEST_CASE("head/token column mapping round-trips") {
  const int v = 16;
  for (int id = 0; id < kStructuredVocab; ++id) {
    CHECK(token_for_head_column(HeadKind::Time, head_column_for_token(HeadKind::Time, id, v), v) ==
          id);
  }
  for (int col = 0; col < head_width(HeadKind::Text, v); ++col) {
    int id = token_for_head_column(HeadKind::Text, col, v);
    CHECK(head_column_for_token(HeadKind::Text, id, v) == col);
  }
  CHECK(head_width(HeadKind::Time, v) == 14);
  CHECK(head_width(HeadKind::Score, v) == 14);
  CHECK(head_width(HeadKind::Text, v) == v + 2);
  CHECK_THROWS_AS(head_column_for_token(HeadKind::Time, 20, v), std::invalid_argument);
}
