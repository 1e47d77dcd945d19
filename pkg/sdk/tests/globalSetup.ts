import { launch, saveState } from "./harness.js";

export default async function setup(): Promise<() => Promise<void>> {
  const { state, stop } = await launch();
  saveState(state);
  return stop;
}
