// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tvcache {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidDescriptor : public Error {
 public:
  using Error::Error;
};

// Insert or attach whose all-but-last path is not in the graph.
class MissingPrefix : public Error {
 public:
  using Error::Error;
};

class UnknownLease : public Error {
 public:
  using Error::Error;
};

class LeaseExpired : public Error {
 public:
  using Error::Error;
};

class CorruptFile : public Error {
 public:
  CorruptFile(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class VersionMismatch : public Error {
 public:
  using Error::Error;
};

class UnknownSnapshot : public Error {
 public:
  using Error::Error;
};

class StorageFull : public Error {
 public:
  using Error::Error;
};

class SandboxDead : public Error {
 public:
  using Error::Error;
};

class MalformedArgs : public Error {
 public:
  using Error::Error;
};

class QueryParseError : public Error {
 public:
  using Error::Error;
};

// A node that was expected to carry a snapshot no longer does.
class SnapshotMissing : public Error {
 public:
  using Error::Error;
};

class BackendUnavailable : public Error {
 public:
  using Error::Error;
};

// The cache service could not be reached or answered with a server error.
class CacheUnavailable : public Error {
 public:
  using Error::Error;
};

}  // namespace tvcache
