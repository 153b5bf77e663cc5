#pragma once

#include <string>
#include <vector>

#include "vlab/common.hpp"

namespace vlab {

// Fixed 64-token vocabulary. No tokenizer: every surface form in the
// synthetic worlds maps 1:1 onto one of these ids. Layout:
//
//   0          <pad>
//   1          <bos>
//   2          ?
//   3          yes
//   4          no
//   5..14      template words: is present a an and scene empty describe look :
//   15..34     object nouns (20)
//   35..40     color names (6)
//   41..63     <r0>..<r22> reserved
namespace vocab {

constexpr int kSize = 64;

constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kQmark = 2;
constexpr int kYes = 3;
constexpr int kNo = 4;
constexpr int kIs = 5;
constexpr int kPresent = 6;
constexpr int kA = 7;
constexpr int kAn = 8;
constexpr int kAnd = 9;
constexpr int kScene = 10;
constexpr int kEmpty = 11;
constexpr int kDescribe = 12;
constexpr int kLook = 13;
constexpr int kColon = 14;

constexpr int kObjectBase = 15;
constexpr int kObjectCount = 20;
constexpr int kColorBase = 35;
constexpr int kColorCount = 6;

const std::vector<std::string>& words();

int object_token(int type);
int color_token(int color);
int type_of_object_token(int token);  // -1 if not an object token

const std::string& word(int token);
int lookup(const std::string& word);  // throws IndexError if unknown

std::string decode(const std::vector<int>& tokens);

}  // namespace vocab
}  // namespace vlab
