# Streaming submap alignment - tests package
