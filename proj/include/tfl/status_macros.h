#ifndef TFL_STATUS_MACROS_H_
#define TFL_STATUS_MACROS_H_

#include "absl/status/status.h"
#include "absl/status/statusor.h"

#define TFL_STATUS_CONCAT_INNER_(a, b) a##b
#define TFL_STATUS_CONCAT_(a, b) TFL_STATUS_CONCAT_INNER_(a, b)

#define TFL_RETURN_IF_ERROR(expr)             \
  do {                                        \
    ::absl::Status tfl_status_ = (expr);      \
    if (!tfl_status_.ok()) return tfl_status_; \
  } while (0)

#define TFL_ASSIGN_OR_RETURN_IMPL_(tmp, lhs, rexpr) \
  auto tmp = (rexpr);                               \
  if (!tmp.ok()) return tmp.status();               \
  lhs = std::move(tmp).value()

#define TFL_ASSIGN_OR_RETURN(lhs, rexpr) \
  TFL_ASSIGN_OR_RETURN_IMPL_(            \
      TFL_STATUS_CONCAT_(tfl_statusor_, __LINE__), lhs, rexpr)

#endif  // TFL_STATUS_MACROS_H_
