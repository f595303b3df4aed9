# Streaming submap alignment - source package
