#pragma once

namespace toxitrace::cusa::assets {

extern const char* const refine_system;
extern const char* const refine_user;
extern const char* const reasoning_toxic;
extern const char* const reasoning_normal;

}  // namespace toxitrace::cusa::assets
