import { defineConfig } from "vitest/config";

// Generous timeouts: the integration suite spawns the real Python service
// and runs a full 100 + 400 iteration workflow against it.
export default defineConfig({
  test: {
    environment: "node",
    testTimeout: 240_000,
    hookTimeout: 120_000,
  },
});
