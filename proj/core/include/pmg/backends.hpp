#pragma once

#include <string>
#include <string_view>

namespace pmg {

enum class Scene { costume, movie, emoticon };

std::string_view to_string(Scene scene);
Scene scene_from_string(std::string_view name);

// Text generation side of a language model (prompt in, completion out).
// Implementations must be safe to call from several threads; a request and
// its response are never interleaved with another call's.
class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    virtual std::string generate(const std::string& prompt) const = 0;
};

// Turns a non-text modality (an image on disk) into a short caption.
class CaptionBackend {
public:
    virtual ~CaptionBackend() = default;
    virtual std::string caption(const std::string& image_ref) const = 0;
};

}  // namespace pmg
