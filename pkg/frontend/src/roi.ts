/**
 * Slice-plane geometry: mapping between pane pixels and volume voxels.
 *
 * The service renders slices with a fixed orientation per viewing axis
 * (matching its PNG output):
 *
 *   axis z -> columns run along x, rows along y
 *   axis y -> columns run along x, rows along z
 *   axis x -> columns run along y, rows along z
 *
 * A pane shows one voxel as a `zoom`x`zoom` pixel cell. `paneToVoxel` /
 * `voxelToPane` are exact inverses for integer zoom levels: converting the
 * top-left pixel of a voxel cell back always yields the same voxel.
 */

export type Axis = "x" | "y" | "z";

export interface Voxel {
  x: number;
  y: number;
  z: number;
}

export interface PanePoint {
  /** Horizontal pane pixel, 0 at the left edge. */
  col: number;
  /** Vertical pane pixel, 0 at the top edge. */
  row: number;
}

/** Axis-aligned box in voxel indices, both corners inclusive. */
export interface RoiBox {
  min: [number, number, number];
  max: [number, number, number];
}

export interface Dims {
  nx: number;
  ny: number;
  nz: number;
}

interface PlaneAxes {
  colAxis: Axis;
  rowAxis: Axis;
}

const PLANE_AXES: Record<Axis, PlaneAxes> = {
  z: { colAxis: "x", rowAxis: "y" },
  y: { colAxis: "x", rowAxis: "z" },
  x: { colAxis: "y", rowAxis: "z" },
};

export function planeAxes(axis: Axis): PlaneAxes {
  return PLANE_AXES[axis];
}

function axisExtent(dims: Dims, axis: Axis): number {
  return axis === "x" ? dims.nx : axis === "y" ? dims.ny : dims.nz;
}

/** Pane size in voxel cells (multiply by zoom for pixels). */
export function paneExtent(dims: Dims, axis: Axis): { cols: number; rows: number } {
  const { colAxis, rowAxis } = planeAxes(axis);
  return { cols: axisExtent(dims, colAxis), rows: axisExtent(dims, rowAxis) };
}

export function paneToVoxel(p: PanePoint, axis: Axis, sliceIndex: number, zoom = 1): Voxel {
  if (!Number.isInteger(zoom) || zoom < 1) {
    throw new Error(`zoom must be a positive integer, got ${zoom}`);
  }
  const { colAxis, rowAxis } = planeAxes(axis);
  const v: Voxel = { x: 0, y: 0, z: 0 };
  v[colAxis] = Math.floor(p.col / zoom);
  v[rowAxis] = Math.floor(p.row / zoom);
  v[axis] = sliceIndex;
  return v;
}

/** Top-left pane pixel of the voxel's screen cell. */
export function voxelToPane(v: Voxel, axis: Axis, zoom = 1): PanePoint {
  const { colAxis, rowAxis } = planeAxes(axis);
  return { col: v[colAxis] * zoom, row: v[rowAxis] * zoom };
}

function clamp(n: number, lo: number, hi: number): number {
  return Math.min(Math.max(n, lo), hi);
}

/** Corner order does not matter: picks are normalized to min/max per axis. */
export function normalizedCorners(a: Voxel, b: Voxel): RoiBox {
  return {
    min: [Math.min(a.x, b.x), Math.min(a.y, b.y), Math.min(a.z, b.z)],
    max: [Math.max(a.x, b.x), Math.max(a.y, b.y), Math.max(a.z, b.z)],
  };
}

/**
 * Build the 3-D box from two in-plane picks plus a slab half-extent along
 * the viewing axis (the drawn slice +/- `slabExtent` slices, clamped to the
 * volume). Both picked voxels are included in the box.
 */
export function roiFromPicks(
  a: PanePoint,
  b: PanePoint,
  axis: Axis,
  sliceIndex: number,
  slabExtent: number,
  dims: Dims,
  zoom = 1,
): RoiBox {
  if (slabExtent < 0 || !Number.isInteger(slabExtent)) {
    throw new Error(`slab extent must be a non-negative integer, got ${slabExtent}`);
  }
  const va = paneToVoxel(a, axis, sliceIndex, zoom);
  const vb = paneToVoxel(b, axis, sliceIndex, zoom);
  const box = normalizedCorners(va, vb);
  const order: Axis[] = ["x", "y", "z"];
  for (let i = 0; i < 3; i++) {
    const ax = order[i]!;
    const hi = axisExtent(dims, ax) - 1;
    box.min[i] = clamp(box.min[i]!, 0, hi);
    box.max[i] = clamp(box.max[i]!, 0, hi);
  }
  const viewing = order.indexOf(axis);
  const extent = axisExtent(dims, axis) - 1;
  box.min[viewing] = clamp(sliceIndex - slabExtent, 0, extent);
  box.max[viewing] = clamp(sliceIndex + slabExtent, 0, extent);
  return box;
}

/** The two corners a box projects to on a pane, or null when the slice lies
 * outside the box along the viewing axis. */
export function projectBox(
  box: RoiBox,
  axis: Axis,
  sliceIndex: number,
  zoom = 1,
): { left: number; top: number; width: number; height: number } | null {
  const order: Axis[] = ["x", "y", "z"];
  const viewing = order.indexOf(axis);
  if (sliceIndex < box.min[viewing]! || sliceIndex > box.max[viewing]!) {
    return null;
  }
  const lo: Voxel = { x: box.min[0]!, y: box.min[1]!, z: box.min[2]! };
  const hi: Voxel = { x: box.max[0]!, y: box.max[1]!, z: box.max[2]! };
  const pLo = voxelToPane(lo, axis, zoom);
  const pHi = voxelToPane(hi, axis, zoom);
  return {
    left: pLo.col,
    top: pLo.row,
    width: pHi.col - pLo.col + zoom,
    height: pHi.row - pLo.row + zoom,
  };
}
