#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace rubato {

// Base for every typed error in the library. `name()` is the stable machine
// identifier surfaced by the CLI; `what()` carries the human detail.
class Error : public std::runtime_error {
public:
    Error(std::string name, const std::string& what)
        : std::runtime_error(what), name_(std::move(name)) {}

    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

#define RUBATO_DEFINE_ERROR(type_name)                          \
    class type_name : public ::rubato::Error {                 \
    public:                                                     \
        explicit type_name(const std::string& what)             \
            : Error(#type_name, what) {}                        \
    }

// Alignment errors shared by the tokenizer (SFT pairing) and the tempo
// mapper (score/performance pairing).
RUBATO_DEFINE_ERROR(LengthMismatch);
RUBATO_DEFINE_ERROR(PitchMismatch);

} // namespace rubato
