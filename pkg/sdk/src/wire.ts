// Canonical chunk bytes, as served by /tiles and hashed for object identity.
//
//   offset 0   4 bytes  magic "ADF1"
//   offset 4   1 byte   dtype code
//   offset 5   4 bytes  width, uint32 LE
//   offset 9   4 bytes  height, uint32 LE
//   offset 13  1 byte   nodata flag
//   offset 14  8 bytes  nodata value, float64 LE (zero when flag is 0)
//   offset 22  payload  row-major cell values, LE
//
// Identity is the SHA-256 of exactly these bytes; decode followed by encode
// must reproduce them bit for bit.

import { ValidationFailedError } from "./errors.js";

export type Dtype = "u8" | "i16" | "i32" | "f32" | "f64";

export type TileValues =
  | Uint8Array
  | Int16Array
  | Int32Array
  | Float32Array
  | Float64Array;

export interface Tile {
  dtype: Dtype;
  width: number;
  height: number;
  nodata: number | null;
  /** Row-major, length width*height. values[row*width + col]. */
  values: TileValues;
}

export const CHUNK_MAGIC = "ADF1";
export const HEADER_SIZE = 22;

const DTYPE_CODES: Record<Dtype, number> = { u8: 1, i16: 2, i32: 3, f32: 4, f64: 5 };
const CODE_DTYPES: Record<number, Dtype> = { 1: "u8", 2: "i16", 3: "i32", 4: "f32", 5: "f64" };
const ITEM_SIZES: Record<Dtype, number> = { u8: 1, i16: 2, i32: 4, f32: 4, f64: 8 };

function valuesFor(dtype: Dtype, payload: ArrayBuffer): TileValues {
  switch (dtype) {
    case "u8":
      return new Uint8Array(payload);
    case "i16":
      return new Int16Array(payload);
    case "i32":
      return new Int32Array(payload);
    case "f32":
      return new Float32Array(payload);
    case "f64":
      return new Float64Array(payload);
  }
}

export function decodeChunk(data: Uint8Array): Tile {
  if (data.length < HEADER_SIZE) {
    throw new ValidationFailedError(`chunk too short: ${data.length} bytes`);
  }
  const magic = String.fromCharCode(data[0]!, data[1]!, data[2]!, data[3]!);
  if (magic !== CHUNK_MAGIC) {
    throw new ValidationFailedError("not a chunk object");
  }
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  const code = view.getUint8(4);
  const dtype = CODE_DTYPES[code];
  if (dtype === undefined) {
    throw new ValidationFailedError(`unknown chunk dtype code ${code}`);
  }
  const width = view.getUint32(5, true);
  const height = view.getUint32(9, true);
  const flag = view.getUint8(13);
  const nodata = flag ? view.getFloat64(14, true) : null;
  const expect = HEADER_SIZE + width * height * ITEM_SIZES[dtype];
  if (data.length !== expect) {
    throw new ValidationFailedError(`chunk payload length ${data.length} != ${expect}`);
  }
  // Copy the payload so multi-byte views start at offset 0 of their own buffer;
  // a Float64Array cannot sit at byte 22 of the response buffer.
  const payload = new ArrayBuffer(expect - HEADER_SIZE);
  new Uint8Array(payload).set(data.subarray(HEADER_SIZE, expect));
  return { dtype, width, height, nodata, values: valuesFor(dtype, payload) };
}

export function encodeChunk(tile: Tile): Uint8Array {
  const itemSize = ITEM_SIZES[tile.dtype];
  if (tile.values.length !== tile.width * tile.height) {
    throw new ValidationFailedError(
      `values length ${tile.values.length} != ${tile.width}x${tile.height}`,
    );
  }
  if (tile.values.BYTES_PER_ELEMENT !== itemSize) {
    throw new ValidationFailedError(
      `values array does not match dtype ${tile.dtype}`,
    );
  }
  const out = new Uint8Array(HEADER_SIZE + tile.values.byteLength);
  const view = new DataView(out.buffer);
  out[0] = 0x41; // A
  out[1] = 0x44; // D
  out[2] = 0x46; // F
  out[3] = 0x31; // 1
  view.setUint8(4, DTYPE_CODES[tile.dtype]);
  view.setUint32(5, tile.width, true);
  view.setUint32(9, tile.height, true);
  view.setUint8(13, tile.nodata === null ? 0 : 1);
  view.setFloat64(14, tile.nodata === null ? 0.0 : tile.nodata, true);
  out.set(
    new Uint8Array(tile.values.buffer, tile.values.byteOffset, tile.values.byteLength),
    HEADER_SIZE,
  );
  return out;
}

/** 1 where the cell holds data, 0 where it is the nodata sentinel. */
export function validMask(tile: Tile): Uint8Array {
  const mask = new Uint8Array(tile.values.length);
  if (tile.nodata === null) {
    mask.fill(1);
    return mask;
  }
  for (let i = 0; i < tile.values.length; i++) {
    mask[i] = tile.values[i] === tile.nodata ? 0 : 1;
  }
  return mask;
}
