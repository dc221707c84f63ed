/**
 * Integration-test support: encode uploadable volumes in the service's
 * single-file format and run the real Python service as a child process.
 */

import { spawn, type ChildProcess } from "node:child_process";
import { createServer } from "node:net";

import type { Dims } from "../src/roi.js";

/** Single-file volume: text header, then the little-endian float32 payload
 * inline, x varying fastest. */
export function encodeMha(dims: Dims, data: Float32Array): Blob {
  const { nx, ny, nz } = dims;
  if (data.length !== nx * ny * nz) {
    throw new Error(`payload has ${data.length} values, dims want ${nx * ny * nz}`);
  }
  const header = new TextEncoder().encode(
    [
      "ObjectType = Image",
      "NDims = 3",
      "BinaryData = True",
      "ElementByteOrderMSB = False",
      `DimSize = ${nx} ${ny} ${nz}`,
      "ElementSpacing = 1 1 1",
      "Offset = 0 0 0",
      "ElementType = MET_FLOAT",
      "ElementDataFile = LOCAL",
      "",
    ].join("\n"),
  );
  const buf = new ArrayBuffer(header.byteLength + data.length * 4);
  new Uint8Array(buf).set(header, 0);
  const view = new DataView(buf, header.byteLength);
  for (let k = 0; k < data.length; k++) {
    view.setFloat32(k * 4, data[k]!, true); // explicit little-endian
  }
  return new Blob([buf], { type: "application/octet-stream" });
}

/** Deterministic smooth anatomy-like field in HU; `shift` displaces it so a
 * fixed/moving pair genuinely disagrees. */
export function smoothVolume(dims: Dims, shift: [number, number, number] = [0, 0, 0]): Float32Array {
  const { nx, ny, nz } = dims;
  const out = new Float32Array(nx * ny * nz);
  const [sx, sy, sz] = shift;
  let i = 0;
  for (let z = 0; z < nz; z++) {
    for (let y = 0; y < ny; y++) {
      for (let x = 0; x < nx; x++) {
        const u = ((x + sx) / nx) * 2 * Math.PI;
        const v = ((y + sy) / ny) * 2 * Math.PI;
        const w = ((z + sz) / nz) * 2 * Math.PI;
        out[i++] =
          -250 +
          300 * Math.cos(u) * Math.sin(v) +
          200 * Math.cos(v + w) +
          150 * Math.sin(u + 2 * w);
      }
    }
  }
  return out;
}

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const addr = srv.address();
      if (addr && typeof addr === "object") {
        const port = addr.port;
        srv.close(() => resolve(port));
      } else {
        srv.close(() => reject(new Error("no port assigned")));
      }
    });
    srv.on("error", reject);
  });
}

export interface RunningService {
  base: string;
  stop: () => Promise<void>;
}

/** Start `python3 -m boxreg.service` on a free port and wait for /healthz. */
export async function startService(): Promise<RunningService> {
  const port = await freePort();
  const child: ChildProcess = spawn(
    "python3",
    ["-m", "boxreg.service", "--host", "127.0.0.1", "--port", String(port)],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  let stderr = "";
  child.stderr?.on("data", (chunk: Buffer) => {
    stderr += chunk.toString();
  });
  const base = `http://127.0.0.1:${port}`;

  const deadline = Date.now() + 60_000;
  for (;;) {
    if (child.exitCode !== null) {
      throw new Error(`service exited with ${child.exitCode}:\n${stderr}`);
    }
    try {
      const res = await fetch(`${base}/healthz`);
      if (res.ok) break;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) {
      child.kill("SIGKILL");
      throw new Error(`service did not come up on ${base}:\n${stderr}`);
    }
    await new Promise((r) => setTimeout(r, 100));
  }

  return {
    base,
    stop: () =>
      new Promise<void>((resolve) => {
        child.once("exit", () => resolve());
        child.kill("SIGTERM");
        setTimeout(() => {
          if (child.exitCode === null) child.kill("SIGKILL");
        }, 5_000).unref();
      }),
  };
}

export function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}
