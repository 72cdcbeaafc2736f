#pragma once

namespace trompt {

const char* version_string();

}  // namespace trompt
