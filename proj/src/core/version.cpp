#include "core/version.hpp"

namespace trompt {

const char* version_string() { return "0.1.0"; }

}  // namespace trompt
